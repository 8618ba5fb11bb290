use alloc::vec::Vec;

use crate::math;
use crate::tensor::Mat;
use crate::volume::PatchGrid;

/// Axis-factorized 3D sinusoidal table, `N x d`.
///
/// Each axis gets `2 * floor(d / 6)` dims (`F = floor(d / 6)` frequencies,
/// sines then cosines, `omega_j = 10000^(-j / F)`), concatenated z, y, x.
/// Dims beyond `6F` are zero.
pub fn positional_embedding_3d(grid: &PatchGrid, d: usize) -> Mat {
    let freqs = d / 6;
    let omegas: Vec<f64> = (0..freqs).map(|j| 1.0 / math::pow(10_000.0, j as f64 / freqs as f64)).collect();
    let axis = 2 * freqs;
    let mut table = Mat::zeros(grid.n_patches(), d);
    for i in 0..grid.n_patches() {
        let (z, y, x) = grid.coords(i);
        let row = table.row_mut(i);
        for (a, pos) in [z, y, x].into_iter().enumerate() {
            let base = a * axis;
            for (j, w) in omegas.iter().enumerate() {
                let phase = pos as f64 * w;
                row[base + j] = math::sin(phase);
                row[base + freqs + j] = math::cos(phase);
            }
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Shape3;

    #[test]
    fn origin_has_zero_phase() {
        let grid = PatchGrid::new(Shape3::cube(32), 8).unwrap();
        let t = positional_embedding_3d(&grid, 66);
        let row = t.row(0);
        for a in 0..3 {
            assert!(row[a * 22..a * 22 + 11].iter().all(|&v| v == 0.0));
            assert!(row[a * 22 + 11..a * 22 + 22].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn z_only_difference_touches_first_third() {
        let grid = PatchGrid::new(Shape3::cube(32), 8).unwrap();
        for d in [64, 66] {
            let t = positional_embedding_3d(&grid, d);
            let (a, b) = (grid.index(0, 2, 3), grid.index(3, 2, 3));
            for c in 0..d {
                if c >= d / 3 {
                    assert_eq!(t.at(a, c), t.at(b, c), "d={d} c={c}");
                }
            }
            assert!((0..d / 3).any(|c| t.at(a, c) != t.at(b, c)));
            // remainder dims are zero
            assert!((6 * (d / 6)..d).all(|c| t.at(b, c) == 0.0));
        }
    }

    #[test]
    fn matches_direct_formula() {
        let grid = PatchGrid::new(Shape3::cube(32), 8).unwrap();
        let d = 66;
        let t = positional_embedding_3d(&grid, d);
        let f = 11usize;
        for bz in 0..4 {
            for by in 0..4 {
                for bx in 0..4 {
                    let i = (bz * 4 + by) * 4 + bx;
                    let mut expect = std::vec::Vec::new();
                    for pos in [bz, by, bx] {
                        let ws: std::vec::Vec<f64> = (0..f).map(|j| (-(j as f64) / f as f64 * 10_000f64.ln()).exp()).collect();
                        expect.extend(ws.iter().map(|w| (pos as f64 * w).sin()));
                        expect.extend(ws.iter().map(|w| (pos as f64 * w).cos()));
                    }
                    for c in 0..d {
                        assert!((t.at(i, c) - expect[c]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
