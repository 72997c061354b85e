//! Fusion of per-scale local region features with the global feature.
//!
//! A 1×1 convolution over channel-concatenated pooled region features is a
//! plain affine map, so each scale is fused with `matrix · concat(locals) + bias`.

use serde::{Deserialize, Serialize};

use crate::vector::{check_dim, check_finite};
use crate::{normalize, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub global_feature: Vec<f64>,
    /// Per scale, the region features in NMS output order.
    pub local_features: Vec<Vec<Vec<f64>>>,
}

/// Affine fusion for one scale. `matrix` has `D` rows of `K·D` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleFusion {
    pub matrix: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl ScaleFusion {
    pub fn output_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.first().map_or(0, Vec::len)
    }

    pub fn identity(dim: usize) -> Self {
        let matrix = (0..dim)
            .map(|r| (0..dim).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            matrix,
            bias: vec![0.0; dim],
        }
    }

    fn validate(&self) -> Result<()> {
        check_dim("fusion matrix rows", self.bias.len(), self.matrix.len())?;
        let cols = self.input_dim();
        for row in &self.matrix {
            check_dim("fusion matrix columns", cols, row.len())?;
            check_finite("fusion matrix", row)?;
        }
        check_finite("fusion bias", &self.bias)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub scales: Vec<ScaleFusion>,
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        self.scales.iter().try_for_each(ScaleFusion::validate)
    }

    /// Number of regions per scale implied by the matrix width for feature dim `dim`.
    pub fn regions_per_scale(&self, dim: usize) -> Result<Vec<usize>> {
        self.scales
            .iter()
            .map(|s| {
                if dim == 0 || s.input_dim() % dim != 0 {
                    Err(Error::DimensionMismatch {
                        context: "fusion matrix columns (multiple of feature dim)",
                        expected: dim,
                        actual: s.input_dim(),
                    })
                } else {
                    Ok(s.input_dim() / dim)
                }
            })
            .collect()
    }
}

/// Concatenates `locals` in order and applies the scale's affine map.
pub fn fuse_scale(locals: &[Vec<f64>], w: &ScaleFusion) -> Result<Vec<f64>> {
    w.validate()?;
    let input: Vec<f64> = locals.iter().flatten().copied().collect();
    check_dim("fuse_scale input", w.input_dim(), input.len())?;
    Ok(w
        .matrix
        .iter()
        .zip(&w.bias)
        .map(|(row, b)| crate::dot(row, &input) + b)
        .collect())
}

/// `concat(global, fused_0, …, fused_{S-1})`, optionally L2-normalized.
pub fn assemble_embedding(
    bundle: &FeatureBundle,
    weights: &FusionWeights,
    normalize_output: bool,
) -> Result<Vec<f64>> {
    check_dim(
        "assemble_embedding scales",
        weights.scales.len(),
        bundle.local_features.len(),
    )?;
    let dim = bundle.global_feature.len();
    check_finite("global feature", &bundle.global_feature)?;
    let mut out = bundle.global_feature.clone();
    for (locals, w) in bundle.local_features.iter().zip(&weights.scales) {
        for f in locals {
            check_dim("local feature", dim, f.len())?;
        }
        let fused = fuse_scale(locals, w)?;
        check_dim("fused feature", dim, fused.len())?;
        out.extend(fused);
    }
    if normalize_output {
        normalize(&out)
    } else {
        Ok(out)
    }
}

/// Appends zero vectors of length `dim` until there are `k` features.
pub fn pad_missing_regions(
    mut locals: Vec<Vec<f64>>,
    k: usize,
    dim: usize,
) -> Result<Vec<Vec<f64>>> {
    if locals.len() > k {
        return Err(Error::config(
            "local_features",
            format!("{} regions exceed the expected {k}", locals.len()),
        ));
    }
    locals.resize(k, vec![0.0; dim]);
    Ok(locals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::l2_norm;
    use proptest::prelude::*;

    #[test]
    fn identity_fusion_passes_through() {
        let f = vec![0.5, -1.0, 2.0];
        assert_eq!(
            fuse_scale(std::slice::from_ref(&f), &ScaleFusion::identity(3)).unwrap(),
            f
        );
    }

    #[test]
    fn zero_matrix_gives_bias() {
        let w = ScaleFusion {
            matrix: vec![vec![0.0; 4]; 2],
            bias: vec![1.5, -0.5],
        };
        let out = fuse_scale(&[vec![1.0, 2.0], vec![3.0, 4.0]], &w).unwrap();
        assert_eq!(out, vec![1.5, -0.5]);
    }

    #[test]
    fn fuse_matches_hand_computation() {
        // K=2, D=3: rows of length 6
        let w = ScaleFusion {
            matrix: vec![
                vec![1.0, 0.0, 2.0, -1.0, 0.5, 0.0],
                vec![0.0, 1.0, 0.0, 0.0, 0.0, 3.0],
                vec![0.25, 0.25, 0.25, 0.25, 0.25, 0.25],
            ],
            bias: vec![0.125, 0.0, -1.0],
        };
        let locals = [vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let out = fuse_scale(&locals, &w).unwrap();
        // 1 + 6 - 4 + 2.5 + 0.125 ; 2 + 18 ; 21/4 - 1
        assert_eq!(out, vec![5.625, 20.0, 4.25]);
    }

    #[test]
    fn fuse_rejects_shape_mismatch() {
        let w = ScaleFusion::identity(3);
        assert!(fuse_scale(&[vec![1.0, 2.0]], &w).is_err());
        let ragged = ScaleFusion {
            matrix: vec![vec![1.0, 0.0], vec![1.0]],
            bias: vec![0.0, 0.0],
        };
        assert!(fuse_scale(&[vec![1.0, 2.0]], &ragged).is_err());
    }

    fn identity_weights(scales: usize, k: usize, dim: usize) -> FusionWeights {
        // picks the first region of each scale
        let matrix = (0..dim)
            .map(|r| (0..k * dim).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
            .collect();
        FusionWeights {
            scales: vec![
                ScaleFusion {
                    matrix,
                    bias: vec![0.0; dim],
                };
                scales
            ],
        }
    }

    #[test]
    fn assembled_dimension() {
        let bundle = FeatureBundle {
            global_feature: vec![1.0; 4],
            local_features: vec![vec![vec![0.5; 4]; 2]; 2],
        };
        let out = assemble_embedding(&bundle, &identity_weights(2, 2, 4), false).unwrap();
        assert_eq!(out.len(), 12);
    }

    #[test]
    fn identity_assembly_repeats_global() {
        let g = vec![1.0, 2.0, 2.0, 4.0];
        let bundle = FeatureBundle {
            global_feature: g.clone(),
            local_features: vec![vec![g.clone()], vec![g.clone()]],
        };
        let out = assemble_embedding(&bundle, &identity_weights(2, 1, 4), true).unwrap();
        let expected: Vec<f64> = g
            .iter()
            .chain(&g)
            .chain(&g)
            .map(|x| x / 75f64.sqrt())
            .collect();
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((l2_norm(&out) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn assembly_errors() {
        let bundle = FeatureBundle {
            global_feature: vec![0.0; 2],
            local_features: vec![vec![vec![0.0; 2]]],
        };
        let w = identity_weights(1, 1, 2);
        assert!(matches!(
            assemble_embedding(&bundle, &w, true),
            Err(Error::ZeroNorm(_))
        ));
        assert!(assemble_embedding(&bundle, &identity_weights(2, 1, 2), false).is_err());
    }

    #[test]
    fn padding() {
        let f = vec![1.0, 2.0];
        assert_eq!(
            pad_missing_regions(vec![f.clone(), f.clone()], 2, 2).unwrap(),
            vec![f.clone(), f.clone()]
        );
        assert_eq!(
            pad_missing_regions(vec![f.clone()], 2, 2).unwrap(),
            vec![f.clone(), vec![0.0, 0.0]]
        );
        assert_eq!(
            pad_missing_regions(vec![], 2, 2).unwrap(),
            vec![vec![0.0; 2]; 2]
        );
        assert!(pad_missing_regions(vec![f.clone(), f.clone(), f], 2, 2).is_err());
    }

    #[test]
    fn region_order_matters() {
        let w = FusionWeights {
            scales: vec![ScaleFusion {
                matrix: vec![vec![0.3, -1.2, 0.8, 2.0], vec![1.1, 0.4, -0.6, 0.9]],
                bias: vec![0.0, 0.0],
            }],
        };
        let a = vec![1.0, -0.5];
        let b = vec![0.2, 0.7];
        let g = vec![1.0, 1.0];
        let fwd = FeatureBundle {
            global_feature: g.clone(),
            local_features: vec![vec![a.clone(), b.clone()]],
        };
        let rev = FeatureBundle {
            global_feature: g,
            local_features: vec![vec![b, a]],
        };
        assert_ne!(
            assemble_embedding(&fwd, &w, false).unwrap(),
            assemble_embedding(&rev, &w, false).unwrap()
        );
    }

    #[test]
    fn weights_json_shape() {
        let json = r#"{"scales":[{"matrix":[[1.0,0.0],[0.0,1.0]],"bias":[0.0,0.5]}]}"#;
        let w: FusionWeights = serde_json::from_str(json).unwrap();
        assert_eq!(w.regions_per_scale(2).unwrap(), vec![1]);
        assert_eq!(w.scales[0].bias, vec![0.0, 0.5]);
    }

    proptest! {
        #[test]
        fn linear_in_each_local(
            x in proptest::collection::vec(-2.0..2.0f64, 3),
            y in proptest::collection::vec(-2.0..2.0f64, 3),
            other in proptest::collection::vec(-2.0..2.0f64, 3),
            m in proptest::collection::vec(-1.0..1.0f64, 18),
            alpha in -3.0..3.0f64,
        ) {
            let w = FusionWeights { scales: vec![ScaleFusion {
                matrix: m.chunks(6).map(<[f64]>::to_vec).collect(),
                bias: vec![0.0; 3],
            }]};
            let g = vec![0.0; 3];
            let emb = |first: Vec<f64>, second: Vec<f64>| assemble_embedding(&FeatureBundle {
                global_feature: g.clone(),
                local_features: vec![vec![first, second]],
            }, &w, false).unwrap();
            // f(αx + y, other) = α f(x, 0) + f(y, other)
            let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + b).collect();
            let lhs = emb(combo, other.clone());
            let fx = emb(x, vec![0.0; 3]);
            let fy = emb(y, other);
            prop_assert_eq!(lhs.len(), 6);
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (alpha * fx[i] + fy[i])).abs() < 1e-9);
            }
        }
    }
}
