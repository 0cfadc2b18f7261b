//! Meta-learned parameter state: per-step subspace factors and checkpoints.
//!
//! Each adaptor tensor ("slot") is either factored as `weight = basis ·
//! coefficients` with an orthonormal basis, or held directly as a full
//! weight matrix. The prompt slot is stored transposed (`[d_model ×
//! prompt_len]`) so its basis columns live in model space like every other
//! slot; materialization transposes it back.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptor::AdaptorStepParams;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::graph::kernels;
use crate::optim::AdamWState;
use crate::rng::SeededRng;
use crate::tensor::{xavier_uniform, Tensor};

/// The chain steps, in chain order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepId {
    /// First step: predicts the subject.
    Sub,
    /// Second step: predicts the object.
    Obj,
    /// Final step: generates the caption.
    Caption,
}

impl StepId {
    /// Stable text key used for optimizer-state and log naming.
    pub fn key(self) -> &'static str {
        match self {
            StepId::Sub => "sub",
            StepId::Obj => "obj",
            StepId::Caption => "caption",
        }
    }
}

/// The adaptor tensors that can be meta-learned, in canonical order.
///
/// Declaration order doubles as the deterministic initialization and update
/// order (it is the `Ord` used by the slot maps).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotName {
    /// Learnable prompt rows, stored transposed as `[d_model × prompt_len]`.
    Prompt,
    /// Feature-to-model projection `[d_feature × d_model]`.
    InProj,
    /// Optional attention query projection `[d_model × d_model]`.
    QProj,
    /// Optional attention key projection `[d_model × d_model]`.
    KProj,
    /// Optional attention value projection `[d_model × d_model]`.
    VProj,
    /// Output projection `[d_model × d_model]`.
    OutProj,
}

impl SlotName {
    /// Stable text key used for optimizer-state and log naming.
    pub fn key(self) -> &'static str {
        match self {
            SlotName::Prompt => "prompt",
            SlotName::InProj => "in_proj",
            SlotName::QProj => "q_proj",
            SlotName::KProj => "k_proj",
            SlotName::VProj => "v_proj",
            SlotName::OutProj => "out_proj",
        }
    }
}

/// One meta-learned tensor, either subspace-factored or direct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlotFactor {
    /// `weight = basis · coef` with `basis: [rows × dim]`, `coef: [dim × cols]`.
    Subspace { basis: Tensor, coef: Tensor },
    /// Plain weight matrix `[rows × cols]`.
    Direct { weight: Tensor },
}

impl SlotFactor {
    /// Draws a subspace factor: an orthonormal Gaussian basis and coefficients
    /// scaled so the product matches a Xavier-uniform weight in variance.
    ///
    /// With orthonormal columns, `Var[(S·c)_ij] = dim/rows · Var[c]`, so the
    /// coefficient bound `sqrt(6·rows / (dim·(rows+cols)))` reproduces the
    /// Xavier bound `sqrt(6/(rows+cols))` variance for the materialized weight.
    pub fn init_subspace(
        rows: usize,
        cols: usize,
        dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if dim == 0 || dim > rows {
            return Err(Error::Dimension(format!(
                "subspace dimension {dim} must be in 1..={rows} for a {rows}-row slot"
            )));
        }
        let basis = orthonormal_basis(rows, dim, rng)?;
        let bound = (6.0 * rows as f64 / (dim as f64 * (rows + cols) as f64)).sqrt();
        let coef = Tensor::uniform(vec![dim, cols], bound, rng);
        Ok(SlotFactor::Subspace { basis, coef })
    }

    /// Draws a direct factor with Xavier-uniform initialization.
    pub fn init_direct(rows: usize, cols: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(SlotFactor::Direct {
            weight: xavier_uniform(&[rows, cols], rng)?,
        })
    }

    /// The full weight this factor stands for.
    pub fn materialize(&self) -> Result<Tensor> {
        match self {
            SlotFactor::Subspace { basis, coef } => kernels::matmul(basis, coef),
            SlotFactor::Direct { weight } => Ok(weight.clone()),
        }
    }

    /// The tensor the inner loop adapts: coefficients, or the weight itself.
    pub fn adaptable(&self) -> &Tensor {
        match self {
            SlotFactor::Subspace { coef, .. } => coef,
            SlotFactor::Direct { weight } => weight,
        }
    }

    /// Replaces the adaptable part, keeping any basis untouched.
    pub fn with_adaptable(&self, value: Tensor) -> Result<Self> {
        let expected = self.adaptable().shape();
        if value.shape() != expected {
            return Err(Error::Dimension(format!(
                "adapted value shape {:?} does not match slot shape {:?}",
                value.shape(),
                expected
            )));
        }
        Ok(match self {
            SlotFactor::Subspace { basis, .. } => SlotFactor::Subspace {
                basis: basis.clone(),
                coef: value,
            },
            SlotFactor::Direct { .. } => SlotFactor::Direct { weight: value },
        })
    }
}

/// Modified Gram-Schmidt orthonormalization of `dim` Gaussian columns.
fn orthonormal_basis(rows: usize, dim: usize, rng: &mut SeededRng) -> Result<Tensor> {
    let draw = Tensor::gaussian(vec![rows, dim], 1.0, rng);
    let mut cols: Vec<Vec<f64>> = (0..dim)
        .map(|j| (0..rows).map(|i| draw.at(i, j)).collect())
        .collect();
    for j in 0..dim {
        for i in 0..j {
            let proj: f64 = cols[j].iter().zip(&cols[i]).map(|(a, b)| a * b).sum();
            for r in 0..rows {
                cols[j][r] -= proj * cols[i][r];
            }
        }
        let norm: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Contract(format!(
                "degenerate Gaussian draw while orthonormalizing basis column {j}"
            )));
        }
        for v in &mut cols[j] {
            *v /= norm;
        }
    }
    let mut data = vec![0.0; rows * dim];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[i * dim + j] = *v;
        }
    }
    Tensor::new(vec![rows, dim], data)
}

/// All meta-learned tensors of one chain step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFactors {
    /// Factors keyed by slot, iterated in canonical slot order.
    pub slots: BTreeMap<SlotName, SlotFactor>,
}

impl StepFactors {
    /// Initializes one step's factors, consuming the generator in canonical
    /// slot order so layouts with and without optional slots stay comparable.
    pub fn init(
        prompt_len: usize,
        feature_dim: usize,
        d_model: usize,
        cfg: &ExperimentConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if prompt_len == 0 {
            return Err(Error::Config("prompt length must be positive".into()));
        }
        let mut slots = BTreeMap::new();
        let mut shapes = vec![
            (SlotName::Prompt, d_model, prompt_len),
            (SlotName::InProj, feature_dim, d_model),
        ];
        if cfg.toggles.projections {
            shapes.push((SlotName::QProj, d_model, d_model));
            shapes.push((SlotName::KProj, d_model, d_model));
            shapes.push((SlotName::VProj, d_model, d_model));
        }
        shapes.push((SlotName::OutProj, d_model, d_model));
        for (name, rows, cols) in shapes {
            let factor = if cfg.toggles.subspace {
                let dim = cfg.effective_subspace_dim(rows);
                SlotFactor::init_subspace(rows, cols, dim, rng)?
            } else {
                SlotFactor::init_direct(rows, cols, rng)?
            };
            slots.insert(name, factor);
        }
        Ok(StepFactors { slots })
    }

    /// Looks a slot up, erroring when the layout lacks it.
    pub fn slot(&self, name: SlotName) -> Result<&SlotFactor> {
        self.slots
            .get(&name)
            .ok_or_else(|| Error::Lookup(format!("step has no {} slot", name.key())))
    }

    /// Materializes the step into concrete adaptor parameters.
    pub fn materialize(&self) -> Result<AdaptorStepParams> {
        let prompt = kernels::transpose(&self.slot(SlotName::Prompt)?.materialize()?)?;
        let in_proj = self.slot(SlotName::InProj)?.materialize()?;
        let out_proj = self.slot(SlotName::OutProj)?.materialize()?;
        let qkv = match (
            self.slots.get(&SlotName::QProj),
            self.slots.get(&SlotName::KProj),
            self.slots.get(&SlotName::VProj),
        ) {
            (Some(q), Some(k), Some(v)) => Some([
                q.materialize()?,
                k.materialize()?,
                v.materialize()?,
            ]),
            (None, None, None) => None,
            _ => {
                return Err(Error::Contract(
                    "attention projection slots must be all present or all absent".into(),
                ))
            }
        };
        Ok(AdaptorStepParams {
            prompt,
            in_proj,
            qkv,
            out_proj,
        })
    }

    /// Replaces every basis with the identity matrix.
    ///
    /// Only valid when each subspace is full-dimensional; used to reduce the
    /// factored engine to plain weight-space adaptation for verification.
    pub fn with_identity_bases(&self) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for (name, factor) in &self.slots {
            let replaced = match factor {
                SlotFactor::Subspace { basis, coef } => {
                    let (rows, dim) = basis.dims2()?;
                    if rows != dim {
                        return Err(Error::Contract(format!(
                            "identity bases need a full-dimensional subspace, \
                             {} slot has {rows} rows but dimension {dim}",
                            name.key()
                        )));
                    }
                    SlotFactor::Subspace {
                        basis: Tensor::eye(rows),
                        coef: coef.clone(),
                    }
                }
                direct => direct.clone(),
            };
            slots.insert(*name, replaced);
        }
        Ok(StepFactors { slots })
    }
}

/// The full meta-learned state: configuration, factors, and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    /// The experiment configuration this state was initialized under.
    pub config: ExperimentConfig,
    /// Number of outer updates applied so far.
    pub iteration: usize,
    /// Per-step factors; disabled steps hold no parameters at all.
    pub steps: crate::adaptor::CotSteps<StepFactors>,
    /// Outer-optimizer moments keyed by `"{step}.{slot}.{part}"`.
    pub optimizer: BTreeMap<String, AdamWState>,
}

/// Initializes meta-learned factors for every enabled step.
///
/// Steps draw in chain order (sub, obj, caption) and disabled steps draw
/// nothing, so ablations leave the enabled steps' draws unchanged only when
/// they disable a suffix of the consumption order; that is an accepted
/// property, not a guarantee.
pub fn init_meta_state(config: &ExperimentConfig, rng: &mut SeededRng) -> Result<MetaState> {
    config.validate()?;
    let d_v = config.model.d_v;
    let d_m = config.model.d_m;
    let [sub_len, obj_len, cap_len] = config.prompt_lengths;
    let sub = if config.toggles.sub_prompt {
        Some(StepFactors::init(sub_len, d_v, d_m, config, rng)?)
    } else {
        None
    };
    let obj = if config.toggles.obj_prompt {
        Some(StepFactors::init(obj_len, d_v, d_m, config, rng)?)
    } else {
        None
    };
    let caption = StepFactors::init(cap_len, d_v, d_m, config, rng)?;
    Ok(MetaState {
        config: config.clone(),
        iteration: 0,
        steps: crate::adaptor::CotSteps { sub, obj, caption },
        optimizer: BTreeMap::new(),
    })
}

/// Materializes every enabled step into concrete adaptor parameters.
pub fn reconstruct_params(
    state: &MetaState,
) -> Result<crate::adaptor::CotSteps<AdaptorStepParams>> {
    state.steps.try_map(StepFactors::materialize)
}

/// Serializes the state as deterministic JSON.
pub fn write_state(path: &Path, state: &MetaState) -> Result<()> {
    let json = serde_json::to_string_pretty(state)?;
    fs::write(path, json)?;
    Ok(())
}

/// Reads a state checkpoint back.
pub fn read_state(path: &Path) -> Result<MetaState> {
    let json = fs::read_to_string(path)?;
    let state: MetaState = serde_json::from_str(&json)?;
    state.config.validate()?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn test_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model.d_v = 12;
        cfg.model.d_m = 8;
        cfg.model.lm_heads = 2;
        cfg.model.ffn_hidden = 16;
        cfg.model.adaptor_heads = 1;
        cfg
    }

    #[test]
    fn subspace_basis_is_orthonormal() {
        let mut rng = rng::stream(5, "basis");
        let factor = SlotFactor::init_subspace(10, 3, 4, &mut rng).unwrap();
        let SlotFactor::Subspace { basis, .. } = &factor else {
            panic!("expected subspace factor");
        };
        assert_eq!(basis.shape(), &[10, 4]);
        let gram = kernels::matmul(&kernels::transpose(basis).unwrap(), basis).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (gram.at(i, j) - want).abs() < 1e-12,
                    "gram[{i}][{j}] = {}",
                    gram.at(i, j)
                );
            }
        }
    }

    #[test]
    fn materialize_identity_basis_returns_coefficients() {
        let factor = SlotFactor::Subspace {
            basis: Tensor::eye(2),
            coef: Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap(),
        };
        let weight = factor.materialize().unwrap();
        assert_eq!(weight.shape(), &[2, 1]);
        assert_eq!(weight.data(), &[3.0, 4.0]);
    }

    #[test]
    fn materialize_zero_basis_returns_zero() {
        let factor = SlotFactor::Subspace {
            basis: Tensor::zeros(vec![3, 2]),
            coef: Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        };
        let weight = factor.materialize().unwrap();
        assert_eq!(weight.data(), &[0.0; 6]);
    }

    #[test]
    fn materialize_diagonal_basis_scales_rows() {
        let factor = SlotFactor::Subspace {
            basis: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap(),
            coef: Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 0.0]).unwrap(),
        };
        let weight = factor.materialize().unwrap();
        assert_eq!(weight.data(), &[1.0, 1.0, 2.0, 0.0]);
    }

    #[test]
    fn coefficient_bound_matches_xavier_variance() {
        // Var of U(-b, b) is b²/3; through an orthonormal basis the product
        // keeps dim/rows of it. Check the sample variance lands near the
        // Xavier target for a large slot.
        let mut rng = rng::stream(11, "coef-var");
        let (rows, cols, dim) = (64, 48, 16);
        let factor = SlotFactor::init_subspace(rows, cols, dim, &mut rng).unwrap();
        let weight = factor.materialize().unwrap();
        let n = weight.numel() as f64;
        let mean: f64 = weight.data().iter().sum::<f64>() / n;
        let var: f64 = weight.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let xavier_var = 2.0 / (rows + cols) as f64;
        assert!(
            (var - xavier_var).abs() < 0.35 * xavier_var,
            "materialized variance {var} vs xavier {xavier_var}"
        );
    }

    #[test]
    fn init_layout_follows_toggles() {
        let mut cfg = test_config();
        cfg.toggles.projections = false;
        let mut rng = rng::stream(7, "init");
        let state = init_meta_state(&cfg, &mut rng).unwrap();
        assert_eq!(state.iteration, 0);
        assert!(state.optimizer.is_empty());
        let caption = &state.steps.caption;
        assert_eq!(
            caption.slots.keys().copied().collect::<Vec<_>>(),
            vec![SlotName::Prompt, SlotName::InProj, SlotName::OutProj]
        );
        // Prompt stored transposed: [d_model × prompt_len].
        let prompt = caption.slot(SlotName::Prompt).unwrap();
        let SlotFactor::Subspace { basis, coef } = prompt else {
            panic!("subspace toggle on, expected factored slot");
        };
        assert_eq!(basis.shape(), &[8, cfg.effective_subspace_dim(8)]);
        assert_eq!(coef.shape(), &[cfg.effective_subspace_dim(8), 4]);
        let params = caption.materialize().unwrap();
        assert_eq!(params.prompt.shape(), &[4, 8]);
        assert_eq!(params.in_proj.shape(), &[12, 8]);
        assert!(params.qkv.is_none());

        cfg.toggles.projections = true;
        cfg.toggles.subspace = false;
        let mut rng = rng::stream(7, "init-direct");
        let state = init_meta_state(&cfg, &mut rng).unwrap();
        let caption = &state.steps.caption;
        assert_eq!(caption.slots.len(), 6);
        assert!(matches!(
            caption.slot(SlotName::QProj).unwrap(),
            SlotFactor::Direct { .. }
        ));
        assert!(caption.materialize().unwrap().qkv.is_some());
    }

    #[test]
    fn disabled_steps_hold_no_parameters() {
        let mut cfg = test_config();
        cfg.toggles.sub_prompt = false;
        cfg.toggles.obj_prompt = false;
        let mut rng = rng::stream(3, "ablate-init");
        let state = init_meta_state(&cfg, &mut rng).unwrap();
        assert!(state.steps.sub.is_none());
        assert!(state.steps.obj.is_none());
        let params = reconstruct_params(&state).unwrap();
        assert!(params.sub.is_none());
        assert!(params.obj.is_none());
        assert_eq!(params.caption.prompt.shape(), &[4, 8]);
    }

    #[test]
    fn identity_bases_require_full_dimension() {
        let mut cfg = test_config();
        cfg.subspace_dim = Some(4);
        let mut rng = rng::stream(9, "identity");
        let state = init_meta_state(&cfg, &mut rng).unwrap();
        assert!(state.steps.caption.with_identity_bases().is_err());

        cfg.subspace_dim = Some(cfg.model.d_m);
        // Full dimension only works when every slot has as many rows as
        // d_model, so shrink the feature dimension to match.
        cfg.model.d_v = cfg.model.d_m;
        let mut rng = rng::stream(9, "identity-full");
        let state = init_meta_state(&cfg, &mut rng).unwrap();
        let identity = state.steps.caption.with_identity_bases().unwrap();
        let direct = identity.materialize().unwrap();
        let coef = identity.slot(SlotName::OutProj).unwrap().adaptable();
        assert_eq!(&direct.out_proj, coef);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let cfg = test_config();
        let mut rng = rng::stream(21, "ckpt");
        let state = init_meta_state(&cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("state-a.json");
        let second = dir.path().join("state-b.json");
        write_state(&first, &state).unwrap();
        let read = read_state(&first).unwrap();
        assert_eq!(read, state);
        write_state(&second, &read).unwrap();
        assert_eq!(
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap()
        );
    }

    #[test]
    fn with_adaptable_preserves_basis_and_checks_shape() {
        let factor = SlotFactor::Subspace {
            basis: Tensor::eye(3),
            coef: Tensor::zeros(vec![3, 2]),
        };
        let updated = factor
            .with_adaptable(Tensor::ones(vec![3, 2]))
            .unwrap();
        let SlotFactor::Subspace { basis, coef } = &updated else {
            panic!("kind changed");
        };
        assert_eq!(basis, &Tensor::eye(3));
        assert_eq!(coef.data(), &[1.0; 6]);
        assert!(factor.with_adaptable(Tensor::ones(vec![2, 3])).is_err());
    }
}
