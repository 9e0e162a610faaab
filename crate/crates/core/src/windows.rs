//! Index maps for window partitioning, cyclic shifts and head reshuffles.
//!
//! All of these are permutations (or expansions) of rows in a flattened
//! `[n, h, w, c]` layout, executed by `Tape::gather_rows`.

/// Rows `(b, y, x)` shifted cyclically by `(dy, dx)`: out(y) = in(y+dy mod h).
pub fn cyclic_shift_map(n: usize, h: usize, w: usize, dy: usize, dx: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for y in 0..h {
            let sy = (y + dy) % h;
            for x in 0..w {
                let sx = (x + dx) % w;
                map.push((b * h + sy) * w + sx);
            }
        }
    }
    map
}

/// `[n,h,w,c]` to `[n·nw, ws·ws, c]` window partition.
pub fn window_partition_map(n: usize, h: usize, w: usize, ws: usize) -> Vec<usize> {
    assert!(h % ws == 0 && w % ws == 0);
    let (gh, gw) = (h / ws, w / ws);
    let mut map = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for wy in 0..gh {
            for wx in 0..gw {
                for ty in 0..ws {
                    for tx in 0..ws {
                        map.push((b * h + wy * ws + ty) * w + wx * ws + tx);
                    }
                }
            }
        }
    }
    map
}

/// Inverse of [`window_partition_map`].
pub fn window_reverse_map(n: usize, h: usize, w: usize, ws: usize) -> Vec<usize> {
    let fwd = window_partition_map(n, h, w, ws);
    let mut inv = vec![0usize; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// `[B, N, heads, hd]` rows to `[B·heads, N, hd]` rows.
pub fn head_split_map(b: usize, n: usize, heads: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(b * n * heads);
    for bi in 0..b {
        for hh in 0..heads {
            for ni in 0..n {
                map.push((bi * n + ni) * heads + hh);
            }
        }
    }
    map
}

/// Inverse of [`head_split_map`].
pub fn head_merge_map(b: usize, n: usize, heads: usize) -> Vec<usize> {
    let fwd = head_split_map(b, n, heads);
    let mut inv = vec![0usize; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// Relative-position index of token pair `(i, j)` in a `ws×ws` window.
fn rel_index(ws: usize, i: usize, j: usize) -> usize {
    let (iy, ix) = (i / ws, i % ws);
    let (jy, jx) = (j / ws, j % ws);
    let ry = iy + ws - 1 - jy;
    let rx = ix + ws - 1 - jx;
    ry * (2 * ws - 1) + rx
}

/// Map expanding a `[(2ws−1)², heads]` bias table (viewed as rows of width 1)
/// into `[heads, N, N]`.
pub fn rel_bias_map(ws: usize, heads: usize) -> Vec<usize> {
    let n = ws * ws;
    let mut map = Vec::with_capacity(heads * n * n);
    for hh in 0..heads {
        for i in 0..n {
            for j in 0..n {
                map.push(rel_index(ws, i, j) * heads + hh);
            }
        }
    }
    map
}

/// Additive attention mask for shifted windows: `0` within a contiguous
/// region, a large negative value across regions. Shape `[nw, N, N]` flattened.
pub fn shift_mask(h: usize, w: usize, ws: usize, shift: usize, neg: f64) -> Vec<f64> {
    let region = |coord: usize, extent: usize| -> usize {
        if coord < extent - ws {
            0
        } else if coord < extent - shift {
            1
        } else {
            2
        }
    };
    let mut ids = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            ids[y * w + x] = region(y, h) * 3 + region(x, w);
        }
    }
    // Partition the id grid the same way the tokens are partitioned after the
    // cyclic shift.
    let shifted: Vec<usize> = cyclic_shift_map(1, h, w, shift, shift)
        .into_iter()
        .map(|src| ids[src])
        .collect();
    let part = window_partition_map(1, h, w, ws);
    let (gh, gw) = (h / ws, w / ws);
    let n = ws * ws;
    let mut mask = vec![0.0f64; gh * gw * n * n];
    for wi in 0..gh * gw {
        for i in 0..n {
            for j in 0..n {
                let a = shifted[part[wi * n + i]];
                let b = shifted[part[wi * n + j]];
                if a != b {
                    mask[(wi * n + i) * n + j] = neg;
                }
            }
        }
    }
    mask
}

/// Patch extraction map: `[n,h,w,3]` to `[n, h/p, w/p, p², 3]` rows.
pub fn patch_map(n: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    assert!(h % p == 0 && w % p == 0);
    let (gh, gw) = (h / p, w / p);
    let mut map = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        map.push((b * h + py * p + dy) * w + px * p + dx);
                    }
                }
            }
        }
    }
    map
}

/// 2×2 neighbourhood map used by patch merging:
/// `[n,h,w,c]` to `[n, h/2, w/2, 4, c]` rows in (even-even, odd-even,
/// even-odd, odd-odd) order.
pub fn merge_map(n: usize, h: usize, w: usize) -> Vec<usize> {
    assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut map = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                map.push((b * h + 2 * y) * w + 2 * x);
                map.push((b * h + 2 * y + 1) * w + 2 * x);
                map.push((b * h + 2 * y) * w + 2 * x + 1);
                map.push((b * h + 2 * y + 1) * w + 2 * x + 1);
            }
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_reverse_round_trip() {
        let (n, h, w, ws) = (2, 8, 8, 4);
        let fwd = window_partition_map(n, h, w, ws);
        let rev = window_reverse_map(n, h, w, ws);
        for dst in 0..fwd.len() {
            assert_eq!(fwd[rev[dst]], dst);
        }
    }

    #[test]
    fn shift_maps_invert() {
        let (n, h, w) = (1, 6, 6);
        let fwd = cyclic_shift_map(n, h, w, 2, 2);
        let rev = cyclic_shift_map(n, h, w, h - 2, w - 2);
        for dst in 0..fwd.len() {
            assert_eq!(rev[fwd[dst]], dst);
        }
    }

    #[test]
    fn head_maps_invert() {
        let (b, n, heads) = (3, 5, 4);
        let fwd = head_split_map(b, n, heads);
        let rev = head_merge_map(b, n, heads);
        for dst in 0..fwd.len() {
            assert_eq!(fwd[rev[dst]], dst);
        }
    }

    #[test]
    fn rel_index_is_symmetric_under_translation() {
        let ws = 3;
        // Token pairs with equal offsets share a bias slot.
        assert_eq!(rel_index(ws, 0, 1), rel_index(ws, 1, 2));
        assert_eq!(rel_index(ws, 0, 3), rel_index(ws, 3, 6));
        assert_ne!(rel_index(ws, 0, 1), rel_index(ws, 1, 0));
    }

    #[test]
    fn shift_mask_blocks_cross_region_pairs_only() {
        let (h, w, ws, s) = (8usize, 8usize, 4usize, 2usize);
        let mask = shift_mask(h, w, ws, s, -1e9);
        let n = ws * ws;
        // Window 0 (top-left) contains no region boundary after the shift in
        // its interior rows/cols except where wrapped content lands.
        let blocked = mask.iter().filter(|&&v| v != 0.0).count();
        assert!(blocked > 0, "shifted mask must block some pairs");
        // Diagonal is never blocked.
        for wi in 0..(h / ws) * (w / ws) {
            for i in 0..n {
                assert_eq!(mask[(wi * n + i) * n + i], 0.0);
            }
        }
    }
}
