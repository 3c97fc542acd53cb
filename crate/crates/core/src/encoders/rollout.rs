use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ROW_TOL: f64 = 1e-4;

/// Patch saliency from attention rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Saliency {
    /// CLS-row rollout mass on each patch, shaped to the patch grid.
    pub grid: Tensor,
    /// Rollout mass the CLS token keeps on itself.
    pub cls_self: f32,
}

impl Saliency {
    pub fn patch_mass(&self) -> f64 {
        self.grid.data().iter().map(|&v| f64::from(v)).sum()
    }
}

/// Product over layers of row-normalized `0.5·A + 0.5·I`, latest layer
/// applied last: `R = M_L · … · M_1`.
pub fn rollout_matrix(attn_maps: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let first = attn_maps
        .first()
        .ok_or_else(|| Error::Input("attention rollout needs at least one layer".into()))?;
    let n = first.shape().first().copied().unwrap_or(0);
    let mut rollout: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for (layer, map) in attn_maps.iter().enumerate() {
        if map.shape() != [n, n] {
            return Err(Error::Input(format!(
                "layer {layer}: attention map shape {:?}, expected [{n}, {n}]",
                map.shape()
            )));
        }
        let mut mixed = vec![vec![0.0f64; n]; n];
        for i in 0..n {
            let row = &map.data()[i * n..(i + 1) * n];
            let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
            if (sum - 1.0).abs() > ROW_TOL || row.iter().any(|&v| v < 0.0) {
                return Err(Error::Input(format!(
                    "layer {layer} row {i} is not stochastic (sum {sum})"
                )));
            }
            for j in 0..n {
                mixed[i][j] = 0.5 * f64::from(row[j]) + if i == j { 0.5 } else { 0.0 };
            }
            let total: f64 = mixed[i].iter().sum();
            mixed[i].iter_mut().for_each(|v| *v /= total);
        }
        let mut next = vec![vec![0.0f64; n]; n];
        for i in 0..n {
            for k in 0..n {
                let m = mixed[i][k];
                if m == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i][j] += m * rollout[k][j];
                }
            }
        }
        rollout = next;
    }
    Ok(rollout)
}

/// CLS row of the rollout restricted to patch columns, as a
/// `grid_h × grid_w` map.
pub fn attention_rollout(attn_maps: &[Tensor], grid_h: usize, grid_w: usize) -> Result<Saliency> {
    let r = rollout_matrix(attn_maps)?;
    if r.len() != grid_h * grid_w + 1 {
        return Err(Error::Input(format!(
            "{} tokens cannot cover a {grid_h}x{grid_w} patch grid plus CLS",
            r.len()
        )));
    }
    let cls = &r[0];
    let grid = Tensor::new(
        vec![grid_h, grid_w],
        cls[1..].iter().map(|&v| v as f32).collect(),
    )?;
    Ok(Saliency {
        grid,
        cls_self: cls[0] as f32,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn uniform_attention_gives_uniform_saliency() {
        let n = 5;
        let uniform = Tensor::full(&[n, n], 1.0 / n as f32);
        let s = attention_rollout(&[uniform.clone(), uniform], 2, 2).unwrap();
        let first = s.grid.data()[0];
        assert!(s.grid.data().iter().all(|&v| (v - first).abs() < 1e-7));
        assert!((s.patch_mass() + f64::from(s.cls_self) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn identity_attention_gives_zero_saliency() {
        let eye = map(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let s = attention_rollout(&[eye.clone(), eye], 1, 2).unwrap();
        assert_eq!(s.grid.data(), &[0.0, 0.0]);
        assert_eq!(s.cls_self, 1.0);
    }

    #[test]
    fn one_hot_cls_row_single_layer() {
        // 0.5·A + 0.5·I on the CLS row [0, 1, 0] gives [0.5, 0.5, 0], which
        // already sums to one.
        let a = map(&[&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let s = attention_rollout(&[a], 1, 2).unwrap();
        assert_eq!(s.grid.data(), &[0.5, 0.0]);
        assert_eq!(s.cls_self, 0.5);
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let bad = map(&[&[0.5, 0.4], &[0.0, 1.0]]);
        assert!(matches!(attention_rollout(&[bad], 1, 1), Err(Error::Input(_))));
    }

    #[test]
    fn saliency_is_non_negative_and_row_sums_to_one() {
        let a = map(&[
            &[0.1, 0.2, 0.3, 0.4, 0.0],
            &[0.2, 0.2, 0.2, 0.2, 0.2],
            &[0.0, 0.0, 1.0, 0.0, 0.0],
            &[0.5, 0.0, 0.0, 0.0, 0.5],
            &[0.25, 0.25, 0.25, 0.25, 0.0],
        ]);
        let s = attention_rollout(&[a.clone(), a], 2, 2).unwrap();
        assert!(s.grid.data().iter().all(|&v| v >= 0.0));
        assert!((s.patch_mass() + f64::from(s.cls_self) - 1.0).abs() < 1e-5);
    }
}
