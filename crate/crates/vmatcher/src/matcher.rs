//! Coarse correlation matching (dual softmax, mutual nearest neighbour,
//! threshold) and two-stage fine refinement to sub-pixel matches.

use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, VmError, VmResult};
use crate::tensor::{ops, Tensor};

/// Similarity matrix between the transformed coarse features of two images.
#[derive(Debug, Clone)]
pub struct CoarseScores {
    pub s: Tensor, // [Na, Nb]
    pub temperature: f32,
}

/// One coarse cell-level match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseMatch {
    pub ia: usize,
    pub ib: usize,
    pub confidence: f32,
}

/// One fine sub-pixel match in full-image pixel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct FineMatch {
    pub xa: f32,
    pub ya: f32,
    pub xb: f32,
    pub yb: f32,
    pub confidence: f32,
}

/// Output of the full matching pipeline.
#[derive(Debug, Clone, Default)]
pub struct MatchSet {
    pub coarse: Vec<CoarseMatch>,
    pub fine: Vec<FineMatch>,
}

/// S[i,j] = <fta[i], ftb[j]> / temperature.
pub fn coarse_scores(fta: &Tensor, ftb: &Tensor, temperature: f32) -> VmResult<CoarseScores> {
    if fta.shape().len() != 2 || ftb.shape().len() != 2 || fta.shape()[1] != ftb.shape()[1] {
        return Err(shape_err(
            "coarse_scores",
            format!("{:?} vs {:?}", fta.shape(), ftb.shape()),
        ));
    }
    let s = ops::scale(&ops::matmul_nt(fta, ftb)?, 1.0 / temperature);
    Ok(CoarseScores { s, temperature })
}

/// P = softmax over rows ⊙ softmax over columns.
pub fn dual_softmax(s: &Tensor) -> VmResult<Tensor> {
    if s.shape().len() != 2 {
        return Err(shape_err("dual_softmax", format!("{:?}", s.shape())));
    }
    let rows = ops::softmax(s, 1)?;
    let cols = ops::softmax(s, 0)?;
    ops::mul(&rows, &cols)
}

/// Mutual-nearest-neighbour selection with a threshold: (i,j) is kept iff
/// m[i,j] is the strict maximum of row i and of column j and m[i,j] >= tau.
/// Works on dual-softmax probabilities or (for the optimized variant) raw
/// scores with a score threshold.
pub fn mnn_select(m: &Tensor, tau: f32) -> VmResult<Vec<CoarseMatch>> {
    if m.shape().len() != 2 {
        return Err(shape_err("mnn_select", format!("{:?}", m.shape())));
    }
    let (na, nb) = (m.shape()[0], m.shape()[1]);
    let d = m.data();
    // strict row maxima
    let mut row_arg = vec![usize::MAX; na];
    for i in 0..na {
        let row = &d[i * nb..(i + 1) * nb];
        let mut best = f32::NEG_INFINITY;
        let mut arg = usize::MAX;
        let mut strict = false;
        for (j, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                arg = j;
                strict = true;
            } else if v == best {
                strict = false;
            }
        }
        if strict {
            row_arg[i] = arg;
        }
    }
    // strict column maxima
    let mut col_arg = vec![usize::MAX; nb];
    for j in 0..nb {
        let mut best = f32::NEG_INFINITY;
        let mut arg = usize::MAX;
        let mut strict = false;
        for i in 0..na {
            let v = d[i * nb + j];
            if v > best {
                best = v;
                arg = i;
                strict = true;
            } else if v == best {
                strict = false;
            }
        }
        if strict {
            col_arg[j] = arg;
        }
    }
    let mut out = Vec::new();
    for i in 0..na {
        let j = row_arg[i];
        if j != usize::MAX && col_arg[j] == i && d[i * nb + j] >= tau {
            out.push(CoarseMatch {
                ia: i,
                ib: j,
                confidence: d[i * nb + j],
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fine feature fusion (FPN-style)
// ---------------------------------------------------------------------------

/// Fuses the transformed 1/8 features with the 1/4 and 1/2 backbone maps:
/// upsample, add a 1x1-projected skip, then a 3x3 conv; twice.
#[derive(Debug, Clone)]
pub struct FineFusion {
    pub proj4_w: Tensor, // [c8, c4, 1, 1]
    pub proj4_b: Tensor,
    pub conv_a_w: Tensor, // [cf, c8, 3, 3]
    pub conv_a_b: Tensor,
    pub proj2_w: Tensor, // [cf, c2, 1, 1]
    pub proj2_b: Tensor,
    pub conv_b_w: Tensor, // [cf, cf, 3, 3]
    pub conv_b_b: Tensor,
}

impl FineFusion {
    pub fn init(c2: usize, c4: usize, c8: usize, cf: usize, rng: &mut impl Rng) -> FineFusion {
        fn conv_init<R: Rng>(cout: usize, cin: usize, k: usize, rng: &mut R) -> (Tensor, Tensor) {
            let std = (2.0 / (cin as f32 * (k * k) as f32)).sqrt();
            (
                Tensor::randn(&[cout, cin, k, k], std, rng).require_grad(),
                Tensor::zeros(&[cout]).require_grad(),
            )
        }
        let (proj4_w, proj4_b) = conv_init(c8, c4, 1, rng);
        let (conv_a_w, conv_a_b) = conv_init(cf, c8, 3, rng);
        let (proj2_w, proj2_b) = conv_init(cf, c2, 1, rng);
        let (conv_b_w, conv_b_b) = conv_init(cf, cf, 3, rng);
        FineFusion {
            proj4_w,
            proj4_b,
            conv_a_w,
            conv_a_b,
            proj2_w,
            proj2_b,
            conv_b_w,
            conv_b_b,
        }
    }

    /// ft8 is the transformed coarse map in [c8, H/8, W/8] layout; f4 and f2
    /// come straight from the backbone. Output: [cf, H/2, W/2].
    pub fn forward(&self, ft8: &Tensor, f4: &Tensor, f2: &Tensor) -> VmResult<Tensor> {
        let (h8, w8) = (ft8.shape()[1], ft8.shape()[2]);
        let up8 = ops::bilinear_resize(ft8, h8 * 2, w8 * 2)?;
        let skip4 = ops::conv2d(f4, &self.proj4_w, Some(&self.proj4_b), 1, 0)?;
        let m4 = ops::add(&up8, &skip4)?;
        let t4 = ops::conv2d(&m4, &self.conv_a_w, Some(&self.conv_a_b), 1, 1)?;
        let up4 = ops::bilinear_resize(&t4, h8 * 4, w8 * 4)?;
        let skip2 = ops::conv2d(f2, &self.proj2_w, Some(&self.proj2_b), 1, 0)?;
        let m2 = ops::add(&up4, &skip2)?;
        ops::conv2d(&m2, &self.conv_b_w, Some(&self.conv_b_b), 1, 1)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.proj4_w,
            &mut self.proj4_b,
            &mut self.conv_a_w,
            &mut self.conv_a_b,
            &mut self.proj2_w,
            &mut self.proj2_b,
            &mut self.conv_b_w,
            &mut self.conv_b_b,
        ]
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("proj4_w", &self.proj4_w),
            ("proj4_b", &self.proj4_b),
            ("conv_a_w", &self.conv_a_w),
            ("conv_a_b", &self.conv_a_b),
            ("proj2_w", &self.proj2_w),
            ("proj2_b", &self.proj2_b),
            ("conv_b_w", &self.conv_b_w),
            ("conv_b_b", &self.conv_b_b),
        ]
    }
}

// ---------------------------------------------------------------------------
// Patch extraction and two-stage refinement
// ---------------------------------------------------------------------------

/// Default fine patch width (at 1/2 resolution): one coarse cell's footprint
/// is 4x4 there, so 8 adds a 2-pixel context margin on each side.
pub const FINE_PATCH: usize = 8;

/// Top-left corner of the fine patch for coarse cell coordinate `cell`
/// (per axis): footprint start minus the context margin.
pub fn patch_start(cell: usize, p: usize) -> isize {
    4 * cell as isize - ((p as isize - 4) / 2)
}

/// Extract a zero-padded p x p patch (rows = pixels, row-major) from a
/// [c, h, w] feature map, starting at (ys, xs).
pub fn extract_patch(fine: &Tensor, ys: isize, xs: isize, p: usize) -> VmResult<Tensor> {
    if fine.shape().len() != 3 {
        return Err(shape_err("extract_patch", format!("{:?}", fine.shape())));
    }
    let (c, h, w) = (fine.shape()[0], fine.shape()[1], fine.shape()[2]);
    let mut map = Vec::with_capacity(p * p * c);
    for dy in 0..p as isize {
        for dx in 0..p as isize {
            let y = ys + dy;
            let x = xs + dx;
            let inside = y >= 0 && y < h as isize && x >= 0 && x < w as isize;
            for ch in 0..c {
                map.push(if inside {
                    (ch * h * w) as i64 + (y as i64) * w as i64 + x as i64
                } else {
                    -1
                });
            }
        }
    }
    ops::remap(fine, Arc::new(map), &[p * p, c])
}

/// Dense correlation between two fine patches: S_f = A · B^T.
pub fn patch_scores(patch_a: &Tensor, patch_b: &Tensor) -> VmResult<Tensor> {
    ops::matmul_nt(patch_a, patch_b)
}

/// Pick the mutual-nearest-neighbour pair with the highest score from a
/// local score matrix. Returns None when every row or column maximum ties.
pub fn select_pixel_match(s: &Tensor) -> VmResult<Option<(usize, usize, f32)>> {
    let pairs = mnn_select(s, f32::NEG_INFINITY)?;
    Ok(pairs
        .into_iter()
        .max_by(|a, b| a.confidence.partial_cmp(&b.confidence).unwrap())
        .map(|m| (m.ia, m.ib, m.confidence)))
}

/// Row-major offsets over {-1, 0, 1}^2 as (dx, dy) rows, matching a 3x3
/// neighbourhood enumerated y-then-x.
pub fn offset_table() -> Tensor {
    let mut data = Vec::with_capacity(18);
    for dy in -1i32..=1 {
        for dx in -1i32..=1 {
            data.push(dx as f32);
            data.push(dy as f32);
        }
    }
    Tensor::from_vec(&[9, 2], data).unwrap()
}

/// Expectation refinement: w = softmax(<feat_a, neigh_b> / sqrt(Cf)),
/// (dx, dy) = sum_k w_k * offset_k. Returns a [1, 2] tensor on the tape.
pub fn refine_stage2(feat_a: &Tensor, neigh_b: &Tensor) -> VmResult<Tensor> {
    if feat_a.shape().len() != 2 || feat_a.shape()[0] != 1 {
        return Err(shape_err("refine_stage2", format!("{:?}", feat_a.shape())));
    }
    let cf = feat_a.shape()[1];
    if neigh_b.shape() != [9, cf] {
        return Err(shape_err(
            "refine_stage2",
            format!("neighbourhood {:?} vs [9, {}]", neigh_b.shape(), cf),
        ));
    }
    let logits = ops::scale(&ops::matmul_nt(feat_a, neigh_b)?, 1.0 / (cf as f32).sqrt());
    let w = ops::softmax(&logits, 1)?;
    ops::matmul(&w, &offset_table())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coarse_scores_identity_like_gram() {
        // orthonormal rows, temperature 1 -> S is the identity
        let fta = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = coarse_scores(&fta, &fta, 1.0).unwrap();
        assert_eq!(s.s.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn coarse_scores_self_argmax_on_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::uniform(&[5, 8], -1.0, 1.0, &mut rng);
        let s = coarse_scores(&f, &f, 0.1).unwrap();
        for i in 0..5 {
            let row = &s.s.data()[i * 5..(i + 1) * 5];
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(arg, i);
        }
    }

    #[test]
    fn coarse_scores_hand_inner_products() {
        let fta = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, -1.0, 1.0]).unwrap();
        let ftb = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 2.0, 1.0, 0.0]).unwrap();
        let s = coarse_scores(&fta, &ftb, 0.5).unwrap();
        // <a0,b0>=4, <a0,b1>=4, <a1,b0>=1, <a1,b1>=-1, all / 0.5
        assert_eq!(s.s.data(), &[8.0, 8.0, 2.0, -2.0]);
    }

    #[test]
    fn dual_softmax_one_by_one_is_one() {
        let s = Tensor::from_vec(&[1, 1], vec![3.7]).unwrap();
        let p = dual_softmax(&s).unwrap();
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn dual_softmax_saturates_to_identity() {
        let t = 50.0;
        let s = Tensor::from_vec(&[2, 2], vec![t, 0.0, 0.0, t]).unwrap();
        let p = dual_softmax(&s).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-6);
        assert!((p.data()[3] - 1.0).abs() < 1e-6);
        assert!(p.data()[1] < 1e-6 && p.data()[2] < 1e-6);
    }

    #[test]
    fn dual_softmax_bounded_by_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::uniform(&[4, 4], -2.0, 2.0, &mut rng);
        let p = dual_softmax(&s).unwrap();
        let rows = ops::softmax(&s, 1).unwrap();
        let cols = ops::softmax(&s, 0).unwrap();
        for i in 0..16 {
            assert!(p.data()[i] <= rows.data()[i].min(cols.data()[i]) + 1e-7);
        }
    }

    #[test]
    fn mnn_identity_matrix_matches_diagonal() {
        let mut d = vec![0.0f32; 9];
        for i in 0..3 {
            d[i * 3 + i] = 1.0;
        }
        let p = Tensor::from_vec(&[3, 3], d).unwrap();
        let ms = mnn_select(&p, 0.2).unwrap();
        assert_eq!(ms.len(), 3);
        for (i, m) in ms.iter().enumerate() {
            assert_eq!((m.ia, m.ib), (i, i));
        }
    }

    #[test]
    fn mnn_tie_rows_yield_no_match() {
        // row 0 has two equal maxima -> excluded
        let p = Tensor::from_vec(&[2, 2], vec![0.5, 0.5, 0.1, 0.4]).unwrap();
        let ms = mnn_select(&p, 0.0).unwrap();
        assert!(ms.iter().all(|m| m.ia != 0));
    }

    #[test]
    fn mnn_agrees_with_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = Tensor::uniform(&[8, 8], 0.0, 1.0, &mut rng);
            let tau = 0.3;
            let fast = mnn_select(&p, tau).unwrap();
            // brute force double loop
            let d = p.data();
            let mut slow = Vec::new();
            for i in 0..8 {
                for j in 0..8 {
                    let v = d[i * 8 + j];
                    if v < tau {
                        continue;
                    }
                    let row_ok = (0..8).all(|jj| jj == j || d[i * 8 + jj] < v);
                    let col_ok = (0..8).all(|ii| ii == i || d[ii * 8 + j] < v);
                    if row_ok && col_ok {
                        slow.push((i, j));
                    }
                }
            }
            let fast_pairs: Vec<(usize, usize)> = fast.iter().map(|m| (m.ia, m.ib)).collect();
            assert_eq!(fast_pairs, slow);
        }
    }

    #[test]
    fn mnn_partial_bijection_and_transpose_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Tensor::uniform(&[6, 9], 0.0, 1.0, &mut rng);
        let ms = mnn_select(&p, 0.1).unwrap();
        let mut seen_a = std::collections::HashSet::new();
        let mut seen_b = std::collections::HashSet::new();
        for m in &ms {
            assert!(seen_a.insert(m.ia));
            assert!(seen_b.insert(m.ib));
        }
        // transpose
        let mut td = vec![0.0f32; 54];
        for i in 0..6 {
            for j in 0..9 {
                td[j * 6 + i] = p.data()[i * 9 + j];
            }
        }
        let pt = Tensor::from_vec(&[9, 6], td).unwrap();
        let mt = mnn_select(&pt, 0.1).unwrap();
        let mut fwd: Vec<(usize, usize)> = ms.iter().map(|m| (m.ia, m.ib)).collect();
        let mut bwd: Vec<(usize, usize)> = mt.iter().map(|m| (m.ib, m.ia)).collect();
        fwd.sort_unstable();
        bwd.sort_unstable();
        assert_eq!(fwd, bwd);
    }

    #[test]
    fn mnn_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Tensor::uniform(&[7, 7], 0.0, 1.0, &mut rng);
        let lo = mnn_select(&p, 0.1).unwrap();
        let hi = mnn_select(&p, 0.5).unwrap();
        let lo_pairs: std::collections::HashSet<_> = lo.iter().map(|m| (m.ia, m.ib)).collect();
        for m in &hi {
            assert!(lo_pairs.contains(&(m.ia, m.ib)));
        }
        assert!(hi.len() <= lo.len());
    }

    #[test]
    fn patch_start_centers_cell_footprint() {
        assert_eq!(patch_start(0, 8), -2);
        assert_eq!(patch_start(3, 8), 10);
    }

    #[test]
    fn extract_patch_zero_pads_borders() {
        let fine = Tensor::from_vec(&[1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let p = extract_patch(&fine, -1, -1, 3).unwrap();
        assert_eq!(p.shape(), &[9, 1]);
        // rows: (-1,-1),(-1,0),(-1,1),(0,-1),(0,0),(0,1),(1,-1),(1,0),(1,1)
        assert_eq!(
            p.data(),
            &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 4.0, 5.0]
        );
    }

    #[test]
    fn stage1_identical_patches_match_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let patch = Tensor::uniform(&[16, 4], -1.0, 1.0, &mut rng);
        let s = patch_scores(&patch, &patch).unwrap();
        let got = select_pixel_match(&s).unwrap().unwrap();
        // self-correlation puts every row's maximum on the diagonal for
        // generic features, so the best pair is diagonal
        assert_eq!(got.0, got.1);
    }

    #[test]
    fn stage1_duplicated_row_is_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        // b: random rows, but row 2 copies a's row 1 scaled up so it wins
        let mut bd: Vec<f32> = Tensor::uniform(&[4, 3], -0.1, 0.1, &mut rng).data().to_vec();
        for ch in 0..3 {
            bd[2 * 3 + ch] = a.data()[3 + ch] * 3.0;
        }
        let b = Tensor::from_vec(&[4, 3], bd).unwrap();
        let s = patch_scores(&a, &b).unwrap();
        let got = select_pixel_match(&s).unwrap().unwrap();
        assert_eq!((got.0, got.1), (1, 2));
    }

    #[test]
    fn stage1_all_ties_dropped() {
        let s = Tensor::zeros(&[4, 4]);
        assert!(select_pixel_match(&s).unwrap().is_none());
    }

    #[test]
    fn stage2_uniform_similarities_give_zero_offset() {
        let feat = Tensor::zeros(&[1, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let neigh = Tensor::uniform(&[9, 4], -1.0, 1.0, &mut rng);
        let d = refine_stage2(&feat, &neigh).unwrap();
        assert!(d.data()[0].abs() < 1e-6);
        assert!(d.data()[1].abs() < 1e-6);
    }

    #[test]
    fn stage2_saturated_corner() {
        // neighbourhood row 0 = offset (-1,-1) dominates
        let cf = 4;
        let feat = Tensor::full(&[1, cf], 2.0);
        let mut nd = vec![0.0f32; 9 * cf];
        for ch in 0..cf {
            nd[ch] = 20.0; // row 0
        }
        let neigh = Tensor::from_vec(&[9, cf], nd).unwrap();
        let d = refine_stage2(&feat, &neigh).unwrap();
        assert!((d.data()[0] + 1.0).abs() < 1e-4, "dx {}", d.data()[0]);
        assert!((d.data()[1] + 1.0).abs() < 1e-4, "dy {}", d.data()[1]);
    }

    #[test]
    fn stage2_expectation_matches_hand_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cf = 6;
        let feat = Tensor::uniform(&[1, cf], -1.0, 1.0, &mut rng);
        let neigh = Tensor::uniform(&[9, cf], -1.0, 1.0, &mut rng);
        let d = refine_stage2(&feat, &neigh).unwrap();

        let mut logits = [0.0f64; 9];
        for k in 0..9 {
            let mut acc = 0.0f64;
            for ch in 0..cf {
                acc += feat.data()[ch] as f64 * neigh.data()[k * cf + ch] as f64;
            }
            logits[k] = acc / (cf as f64).sqrt();
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let mut ex = 0.0f64;
        let mut ey = 0.0f64;
        for k in 0..9 {
            let w = exps[k] / sum;
            ex += w * ((k % 3) as f64 - 1.0);
            ey += w * ((k / 3) as f64 - 1.0);
        }
        assert!((d.data()[0] as f64 - ex).abs() < 1e-6);
        assert!((d.data()[1] as f64 - ey).abs() < 1e-6);
    }

    #[test]
    fn stage2_offsets_stay_in_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let feat = Tensor::uniform(&[1, 4], -3.0, 3.0, &mut rng);
            let neigh = Tensor::uniform(&[9, 4], -3.0, 3.0, &mut rng);
            let d = refine_stage2(&feat, &neigh).unwrap();
            assert!(d.data()[0].abs() <= 1.0 + 1e-6);
            assert!(d.data()[1].abs() <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn fine_fusion_shapes_and_zero_skip_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c2, c4, c8, cf) = (4, 6, 8, 5);
        let mut fusion = FineFusion::init(c2, c4, c8, cf, &mut rng);
        let ft8 = Tensor::uniform(&[c8, 8, 8], -1.0, 1.0, &mut rng);
        let f4 = Tensor::uniform(&[c4, 16, 16], -1.0, 1.0, &mut rng);
        let f2 = Tensor::uniform(&[c2, 32, 32], -1.0, 1.0, &mut rng);
        let out = fusion.forward(&ft8, &f4, &f2).unwrap();
        assert_eq!(out.shape(), &[cf, 32, 32]);

        // zero skip projections: output equals the pure coarse path
        fusion.proj4_w = Tensor::zeros(&[c8, c4, 1, 1]).require_grad();
        fusion.proj4_b = Tensor::zeros(&[c8]).require_grad();
        fusion.proj2_w = Tensor::zeros(&[cf, c2, 1, 1]).require_grad();
        fusion.proj2_b = Tensor::zeros(&[cf]).require_grad();
        let with_skips = fusion.forward(&ft8, &f4, &f2).unwrap();
        let zero4 = Tensor::zeros(&[c4, 16, 16]);
        let zero2 = Tensor::zeros(&[c2, 32, 32]);
        let pure = fusion.forward(&ft8, &zero4, &zero2).unwrap();
        assert_eq!(with_skips.data(), pure.data());
    }
}
