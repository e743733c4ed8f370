//! Lossless rearrangement between feature maps and patch grids.
//!
//! A `(B, d, H, W)` map with `h × w` patches becomes a `(B, P, N, d)` grid
//! where `P = h·w` is the intra-patch offset and `N = HW / P` the patch index:
//! pixel `(y, x)` lands at `p = (y mod h)·w + (x mod w)`,
//! `n = (y div h)·(W / w) + (x div w)`.

use crate::error::{config_err, Result};
use crate::substrate::{CustomOp, Graph, Tensor4, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    /// `(batch, P, N, d)`.
    pub data: Tensor4,
    pub patch_h: usize,
    pub patch_w: usize,
    pub origin_h: usize,
    pub origin_w: usize,
}

impl PatchGrid {
    pub fn patch_size(&self) -> usize {
        self.patch_h * self.patch_w
    }

    pub fn num_patches(&self) -> usize {
        (self.origin_h / self.patch_h) * (self.origin_w / self.patch_w)
    }

    fn validate(&self) -> Result<()> {
        let [_, p, n, _] = self.data.shape();
        if self.patch_h == 0
            || self.patch_w == 0
            || !self.origin_h.is_multiple_of(self.patch_h)
            || !self.origin_w.is_multiple_of(self.patch_w)
            || p != self.patch_size()
            || n != self.num_patches()
        {
            return Err(config_err!(
                "patch grid {:?} inconsistent with origin {}x{} and patch {}x{}",
                self.data.shape(),
                self.origin_h,
                self.origin_w,
                self.patch_h,
                self.patch_w
            ));
        }
        Ok(())
    }
}

fn check_divisible(h: usize, w: usize, patch_h: usize, patch_w: usize) -> Result<()> {
    if patch_h == 0 || patch_w == 0 {
        return Err(config_err!("patch size must be positive, got {patch_h}x{patch_w}"));
    }
    if !h.is_multiple_of(patch_h) || !w.is_multiple_of(patch_w) {
        let pad_h = (patch_h - h % patch_h) % patch_h;
        let pad_w = (patch_w - w % patch_w) % patch_w;
        return Err(config_err!(
            "{h}x{w} map is not divisible into {patch_h}x{patch_w} patches; pad by {pad_h} rows and {pad_w} columns"
        ));
    }
    Ok(())
}

fn scatter_index(h: usize, w: usize, patch_h: usize, patch_w: usize) -> Vec<(usize, usize)> {
    // For each pixel y*W + x: (p, n)
    let per_row = w / patch_w;
    let mut idx = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = (y % patch_h) * patch_w + x % patch_w;
            let n = (y / patch_h) * per_row + x / patch_w;
            idx.push((p, n));
        }
    }
    idx
}

fn unfold_raw(x: &[f64], shape: [usize; 4], patch_h: usize, patch_w: usize) -> Vec<f64> {
    let [b, d, h, w] = shape;
    let (pp, nn) = (patch_h * patch_w, h * w / (patch_h * patch_w));
    let idx = scatter_index(h, w, patch_h, patch_w);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for c in 0..d {
            let plane = &x[(bi * d + c) * h * w..(bi * d + c + 1) * h * w];
            for (pix, &(p, n)) in idx.iter().enumerate() {
                out[((bi * pp + p) * nn + n) * d + c] = plane[pix];
            }
        }
    }
    out
}

fn fold_raw(xp: &[f64], shape: [usize; 4], patch_h: usize, patch_w: usize) -> Vec<f64> {
    let [b, d, h, w] = shape;
    let (pp, nn) = (patch_h * patch_w, h * w / (patch_h * patch_w));
    let idx = scatter_index(h, w, patch_h, patch_w);
    let mut out = vec![0.0; xp.len()];
    for bi in 0..b {
        for c in 0..d {
            let plane = &mut out[(bi * d + c) * h * w..(bi * d + c + 1) * h * w];
            for (pix, &(p, n)) in idx.iter().enumerate() {
                plane[pix] = xp[((bi * pp + p) * nn + n) * d + c];
            }
        }
    }
    out
}

/// Splits an NCHW map into flattened patches.
pub fn unfold(x: &Tensor4, patch_h: usize, patch_w: usize) -> Result<PatchGrid> {
    let [b, d, h, w] = x.shape();
    check_divisible(h, w, patch_h, patch_w)?;
    let pp = patch_h * patch_w;
    let data = Tensor4::from_vec([b, pp, h * w / pp, d], unfold_raw(x.data(), x.shape(), patch_h, patch_w))?;
    Ok(PatchGrid { data, patch_h, patch_w, origin_h: h, origin_w: w })
}

/// Exact inverse of [`unfold`].
pub fn fold(grid: &PatchGrid) -> Result<Tensor4> {
    grid.validate()?;
    let [b, _, _, d] = grid.data.shape();
    let shape = [b, d, grid.origin_h, grid.origin_w];
    Tensor4::from_vec(shape, fold_raw(grid.data.data(), shape, grid.patch_h, grid.patch_w))
}

struct UnfoldOp {
    map_shape: [usize; 4],
    patch_h: usize,
    patch_w: usize,
}

impl CustomOp for UnfoldOp {
    fn name(&self) -> &'static str {
        "unfold"
    }
    fn backward(&self, _: &[&Tensor4], _: &Tensor4, grad_out: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(fold_raw(grad_out, self.map_shape, self.patch_h, self.patch_w))])
    }
}

struct FoldOp {
    map_shape: [usize; 4],
    patch_h: usize,
    patch_w: usize,
}

impl CustomOp for FoldOp {
    fn name(&self) -> &'static str {
        "fold"
    }
    fn backward(&self, _: &[&Tensor4], _: &Tensor4, grad_out: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(unfold_raw(grad_out, self.map_shape, self.patch_h, self.patch_w))])
    }
}

/// Differentiable [`unfold`]: `(B, d, H, W)` → `(B, P, N, d)`.
pub fn unfold_node(g: &mut Graph, x: Var, patch_h: usize, patch_w: usize) -> Result<Var> {
    let grid = unfold(g.value(x), patch_h, patch_w)?;
    let op = UnfoldOp { map_shape: g.shape(x), patch_h, patch_w };
    Ok(g.custom(&[x], grid.data, Box::new(op)))
}

/// Differentiable [`fold`] back to an `origin_h × origin_w` map.
pub fn fold_node(g: &mut Graph, xp: Var, patch_h: usize, patch_w: usize, origin_h: usize, origin_w: usize) -> Result<Var> {
    let grid = PatchGrid { data: g.value(xp).clone(), patch_h, patch_w, origin_h, origin_w };
    let map = fold(&grid)?;
    let op = FoldOp { map_shape: map.shape(), patch_h, patch_w };
    Ok(g.custom(&[xp], map, Box::new(op)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ramp_image_matches_index_formula() {
        let x = Tensor4::from_vec([1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let grid = unfold(&x, 2, 2).unwrap();
        assert_eq!(grid.data.shape(), [1, 4, 4, 1]);
        for p in 0..4 {
            for n in 0..4 {
                let (py, px) = (p / 2, p % 2);
                let (ny, nx) = (n / 2, n % 2);
                let expected = ((ny * 2 + py) * 4 + nx * 2 + px) as f64;
                assert_eq!(grid.data.at(0, p, n, 0), expected);
            }
        }
    }

    #[test]
    fn unit_patch_is_a_flat_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::randn([1, 3, 3, 5], 1.0, &mut rng);
        let grid = unfold(&x, 1, 1).unwrap();
        assert_eq!(grid.data.shape(), [1, 1, 15, 3]);
        let mut a = grid.data.data().to_vec();
        let mut b = x.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn fold_matches_index_formula_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = Tensor4::randn([2, 6, 4, 3], 1.0, &mut rng);
        let grid = PatchGrid { data, patch_h: 2, patch_w: 3, origin_h: 4, origin_w: 6 };
        let map = fold(&grid).unwrap();
        assert_eq!(map.shape(), [2, 3, 4, 6]);
        for b in 0..2 {
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..6 {
                        let p = (y % 2) * 3 + x % 3;
                        let n = (y / 2) * 2 + x / 3;
                        assert_eq!(map.at(b, c, y, x), grid.data.at(b, p, n, c));
                    }
                }
            }
        }
        let zero = PatchGrid { data: Tensor4::zeros([1, 4, 4, 2]), patch_h: 2, patch_w: 2, origin_h: 4, origin_w: 4 };
        assert!(fold(&zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn errors_name_required_padding_and_bad_origin() {
        let err = unfold(&Tensor4::zeros([1, 1, 5, 4]), 2, 2).unwrap_err().to_string();
        assert!(err.contains("pad by 1 rows and 0 columns"), "{err}");
        let bad = PatchGrid { data: Tensor4::zeros([1, 4, 4, 2]), patch_h: 2, patch_w: 2, origin_h: 4, origin_w: 6 };
        assert!(fold(&bad).is_err());
    }

    #[test]
    fn nodes_are_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::randn([2, 3, 4, 6], 1.0, &mut rng);
        let w = Tensor4::randn([2, 4, 6, 3], 1.0, &mut rng);
        let err = grad_check(|g, v| {
            let p = unfold_node(g, v, 2, 2)?;
            let wv = g.input(w.clone());
            let m = g.mul(p, wv)?;
            Ok(g.sum(m))
        }, &x, 1e-4)
        .unwrap();
        assert!(err < 1e-8);
        let grid = Tensor4::randn([1, 4, 6, 3], 1.0, &mut rng);
        let w2 = Tensor4::randn([1, 3, 4, 6], 1.0, &mut rng);
        let err = grad_check(|g, v| {
            let m = fold_node(g, v, 2, 2, 4, 6)?;
            let wv = g.input(w2.clone());
            let m = g.mul(m, wv)?;
            Ok(g.sum(m))
        }, &grid, 1e-4)
        .unwrap();
        assert!(err < 1e-8);
    }

    proptest! {
        #[test]
        fn fold_unfold_round_trip(b in 1usize..3, d in 1usize..4, ph in 1usize..4, pw in 1usize..4,
                                  nh in 1usize..4, nw in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor4::randn([b, d, ph * nh, pw * nw], 1.0, &mut rng);
            let grid = unfold(&x, ph, pw).unwrap();
            prop_assert_eq!(fold(&grid).unwrap(), x);
            let back = unfold(&fold(&grid).unwrap(), ph, pw).unwrap();
            prop_assert_eq!(back, grid);
        }
    }
}
