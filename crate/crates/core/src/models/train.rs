use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lambda::LambdaSchedule;
use super::losses::{ensemble_objective, pv_forward_and_loss, EnsembleLoss};
use super::srn::Srn;
use super::uncertain::{ModelKind, UncertainModel};
use crate::encoders::EncoderSpec;
use crate::nn::{Adam, CosineSchedule, DecoderSpec, Mode, Parameterized};
use crate::volume::{sample_training_batch, VolumeGrid};
use crate::{Error, Result};

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Parameters of the regularization-weight ramp; its length is the number
/// of training steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaSettings {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub growth_rate: f64,
}

impl Default for LambdaSettings {
    fn default() -> Self {
        Self {
            lambda_min: 0.0,
            lambda_max: 10.0,
            growth_rate: 500.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub steps: usize,
    pub batch_size: usize,
    /// Initial learning rate; `None` picks 5e-3, or 5e-4 for the variance head.
    pub lr: Option<f64>,
    pub lr_min: f64,
    pub seed: u64,
    /// Decoders (MDSRN/RMDSRN) or networks (DE).
    pub members: usize,
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
    pub schedule: LambdaSettings,
    /// Dropout probability, MCD only.
    pub dropout: f64,
    pub mcd_passes: usize,
    pub pv_variance_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Rmdsrn,
            steps: 50_000,
            batch_size: 1 << 17,
            lr: None,
            lr_min: 1e-7,
            seed: 0,
            members: 5,
            encoder: EncoderSpec::default(),
            decoder: DecoderSpec::default(),
            schedule: LambdaSettings::default(),
            dropout: 0.1,
            mcd_passes: 5,
            pv_variance_floor: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn initial_lr(&self) -> f64 {
        self.lr.unwrap_or(if self.kind == ModelKind::Pv { 5e-4 } else { 5e-3 })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        match self.kind {
            ModelKind::Mdsrn | ModelKind::Rmdsrn | ModelKind::De if self.members < 2 => {
                return bad(format!("{} needs at least 2 members, got {}", self.kind, self.members));
            }
            ModelKind::Mcd if !(self.dropout > 0.0 && self.dropout < 1.0) => {
                return bad(format!("MC dropout probability {} outside (0, 1)", self.dropout));
            }
            ModelKind::Mcd if self.mcd_passes < 2 => {
                return bad(format!("MC dropout needs >= 2 passes, got {}", self.mcd_passes));
            }
            ModelKind::Pv if !(self.pv_variance_floor > 0.0) => {
                return bad("variance floor must be positive".into());
            }
            _ => {}
        }
        CosineSchedule::new(self.initial_lr(), self.lr_min, self.steps)?;
        if self.kind == ModelKind::Rmdsrn {
            self.lambda_schedule()?;
        }
        Ok(())
    }

    /// The regularization ramp for RMDSRN; plain MDSRN always uses zero.
    pub fn lambda_schedule(&self) -> Result<LambdaSchedule> {
        let s = self.schedule;
        LambdaSchedule::new(s.lambda_min, s.lambda_max, s.growth_rate, self.steps.max(2))
    }
}

/// Loss breakdown of one optimization step. For the variance head `member`
/// holds the NLL and `var` is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub lr: f64,
    pub lambda: f64,
    pub member: f64,
    pub var: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,lr,lambda,L_member,L_var,total";

impl LossReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.lr, self.lambda, self.member, self.var, self.total
        )
    }
}

#[derive(Debug, Clone, Copy)]
enum Objective {
    Ensemble { lambda: f64 },
    Nll { floor: f64 },
}

struct Parts {
    member: f64,
    var: f64,
    total: f64,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Forward, loss, and backward for one batch. Parameter gradients are
/// accumulated into `srn`. Decoders run in parallel with private buffers;
/// their feature gradients are summed in decoder order before the encoder
/// backward, so the result does not depend on scheduling.
fn accumulate_step(
    srn: &mut Srn,
    coords: &[[f64; 3]],
    targets: &[f64],
    mode: Mode,
    dropout_rngs: &mut [ChaCha8Rng],
    objective: Objective,
) -> Result<Parts> {
    let (features, ecache) = srn.encode(coords)?;
    let forward: Vec<_> = srn
        .decoders
        .par_iter()
        .zip(dropout_rngs.par_iter_mut())
        .map(|(d, rng)| d.forward(features.view(), mode, rng))
        .collect::<Result<_>>()?;

    let (parts, dys) = match objective {
        Objective::Ensemble { lambda } => {
            let mut preds = Array2::zeros((srn.members(), coords.len()));
            for (i, (y, _)) in forward.iter().enumerate() {
                preds.row_mut(i).assign(&y.column(0));
            }
            let EnsembleLoss {
                member,
                var,
                total,
                grad,
            } = ensemble_objective(preds.view(), targets, lambda)?;
            let dys: Vec<Array2<f64>> = grad
                .rows()
                .into_iter()
                .map(|r| r.to_owned().insert_axis(Axis(1)))
                .collect();
            (Parts { member, var, total }, dys)
        }
        Objective::Nll { floor } => {
            let nll = pv_forward_and_loss(forward[0].0.view(), targets, floor)?;
            let parts = Parts {
                member: nll.loss,
                var: 0.0,
                total: nll.loss,
            };
            (parts, vec![nll.grad])
        }
    };

    let backward: Vec<(Vec<Vec<f64>>, Array2<f64>)> = srn
        .decoders
        .par_iter()
        .zip(forward.par_iter())
        .zip(dys.par_iter())
        .map(|((d, (_, cache)), dy)| {
            let mut bufs = d.grad_buffers();
            let dx = d.backward_into(cache, dy.view(), &mut bufs)?;
            Ok((bufs, dx))
        })
        .collect::<Result<_>>()?;

    let mut dfeat = Array2::<f64>::zeros(features.dim());
    for (d, (bufs, dx)) in srn.decoders.iter_mut().zip(&backward) {
        d.accumulate_grads(bufs);
        dfeat += dx;
    }
    srn.encoder.backward(&ecache, dfeat.view());
    Ok(parts)
}

/// Accumulates the gradient of `L_member + lambda * L_var` for a fixed batch
/// into the model's parameter gradients and returns the loss.
pub fn ensemble_loss_gradients(
    srn: &mut Srn,
    coords: &[[f64; 3]],
    targets: &[f64],
    lambda: f64,
) -> Result<f64> {
    let mut rngs: Vec<_> = (0..srn.members()).map(|i| seeded(0, DROPOUT_STREAM + i as u64)).collect();
    let parts = accumulate_step(srn, coords, targets, Mode::Infer, &mut rngs, Objective::Ensemble { lambda })?;
    Ok(parts.total)
}

/// Runs the optimization loop on an initialized network.
fn fit(
    srn: &mut Srn,
    volume: &VolumeGrid,
    cfg: &TrainConfig,
    seed: u64,
    mode: Mode,
    lambda: impl Fn(usize) -> Result<f64>,
    objective: impl Fn(f64) -> Objective,
) -> Result<Vec<LossReport>> {
    let lr_schedule = CosineSchedule::new(cfg.initial_lr(), cfg.lr_min, cfg.steps)?;
    let mut batch_rng = seeded(seed, BATCH_STREAM);
    let mut dropout_rngs: Vec<_> = (0..srn.members())
        .map(|i| seeded(seed, DROPOUT_STREAM + i as u64))
        .collect();
    let mut adam = Adam::new(&srn.params());
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = sample_training_batch(volume, cfg.batch_size, &mut batch_rng)?;
        let lam = lambda(step)?;
        let parts = accumulate_step(
            srn,
            &batch.coords,
            &batch.targets,
            mode,
            &mut dropout_rngs,
            objective(lam),
        )?;
        if !parts.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                lambda: lam,
                member: parts.member,
                var: parts.var,
            });
        }
        let lr = lr_schedule.lr_at(step - 1)?;
        adam.step(&mut srn.params_mut(), lr);
        srn.zero_grad();
        history.push(LossReport {
            step,
            lr,
            lambda: lam,
            member: parts.member,
            var: parts.var,
            total: parts.total,
        });
    }
    Ok(history)
}

fn check_volume(volume: &VolumeGrid) -> Result<()> {
    if !volume.is_normalized() {
        return Err(Error::InvalidParam("training requires a normalized volume".into()));
    }
    Ok(())
}

fn init_srn(cfg: &TrainConfig, seed: u64, members: usize, outputs: usize, dropout: f64) -> Result<Srn> {
    Srn::new(
        &cfg.encoder,
        &cfg.decoder,
        members,
        outputs,
        dropout,
        &mut seeded(seed, INIT_STREAM),
    )
}

/// Trains a multi-decoder model. Kind `mdsrn` never applies the
/// regularization; kind `rmdsrn` follows the configured lambda ramp.
pub fn train_rmdsrn(volume: &VolumeGrid, cfg: &TrainConfig) -> Result<(UncertainModel, Vec<LossReport>)> {
    check_volume(volume)?;
    cfg.validate()?;
    let kind = cfg.kind;
    if !matches!(kind, ModelKind::Mdsrn | ModelKind::Rmdsrn) {
        return Err(Error::InvalidParam(format!("train_rmdsrn called with kind {kind}")));
    }
    let mut srn = init_srn(cfg, cfg.seed, cfg.members, 1, 0.0)?;
    let schedule = cfg.lambda_schedule()?;
    let history = fit(
        &mut srn,
        volume,
        cfg,
        cfg.seed,
        Mode::Infer,
        |t| match kind {
            ModelKind::Rmdsrn => schedule.lambda_at(t.min(schedule.t_max)),
            _ => Ok(0.0),
        },
        |lambda| Objective::Ensemble { lambda },
    )?;
    Ok((UncertainModel::MultiDecoder { kind, srn }, history))
}

/// Trains `seeds.len()` independent single-decoder networks, one per seed.
/// The returned history sums member losses step by step.
pub fn train_deep_ensemble_with_seeds(
    volume: &VolumeGrid,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<(UncertainModel, Vec<LossReport>)> {
    check_volume(volume)?;
    cfg.validate()?;
    let mut members = Vec::with_capacity(seeds.len());
    let mut history: Vec<LossReport> = Vec::new();
    for &seed in seeds {
        let mut srn = init_srn(cfg, seed, 1, 1, 0.0)?;
        let h = fit(
            &mut srn,
            volume,
            cfg,
            seed,
            Mode::Infer,
            |_| Ok(0.0),
            |lambda| Objective::Ensemble { lambda },
        )?;
        if history.is_empty() {
            history = h;
        } else {
            for (acc, r) in history.iter_mut().zip(&h) {
                acc.member += r.member;
                acc.total += r.total;
            }
        }
        members.push(srn);
    }
    Ok((UncertainModel::DeepEnsemble(members), history))
}

/// Deep ensemble with member seeds `cfg.seed + i`.
pub fn train_deep_ensemble(volume: &VolumeGrid, cfg: &TrainConfig) -> Result<(UncertainModel, Vec<LossReport>)> {
    let seeds: Vec<u64> = (0..cfg.members as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    train_deep_ensemble_with_seeds(volume, cfg, &seeds)
}

/// Single-decoder network with dropout active during training; inference
/// uses `cfg.mcd_passes` stochastic passes seeded from `cfg.seed`.
pub fn train_mcd(volume: &VolumeGrid, cfg: &TrainConfig) -> Result<(UncertainModel, Vec<LossReport>)> {
    check_volume(volume)?;
    cfg.validate()?;
    let mut srn = init_srn(cfg, cfg.seed, 1, 1, cfg.dropout)?;
    let history = fit(
        &mut srn,
        volume,
        cfg,
        cfg.seed,
        Mode::Train,
        |_| Ok(0.0),
        |lambda| Objective::Ensemble { lambda },
    )?;
    Ok((
        UncertainModel::McDropout {
            srn,
            passes: cfg.mcd_passes,
            seed: cfg.seed,
        },
        history,
    ))
}

/// Single network with a two-output head trained by Gaussian NLL.
pub fn train_pv(volume: &VolumeGrid, cfg: &TrainConfig) -> Result<(UncertainModel, Vec<LossReport>)> {
    check_volume(volume)?;
    cfg.validate()?;
    let floor = cfg.pv_variance_floor;
    let mut srn = init_srn(cfg, cfg.seed, 1, 2, 0.0)?;
    let history = fit(
        &mut srn,
        volume,
        cfg,
        cfg.seed,
        Mode::Infer,
        |_| Ok(0.0),
        |_| Objective::Nll { floor },
    )?;
    Ok((UncertainModel::PredictVariance { srn, floor }, history))
}

/// Dispatches on `cfg.kind`.
pub fn train(volume: &VolumeGrid, cfg: &TrainConfig) -> Result<(UncertainModel, Vec<LossReport>)> {
    match cfg.kind {
        ModelKind::Mdsrn | ModelKind::Rmdsrn => train_rmdsrn(volume, cfg),
        ModelKind::De => train_deep_ensemble(volume, cfg),
        ModelKind::Mcd => train_mcd(volume, cfg),
        ModelKind::Pv => train_pv(volume, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::losses::member_loss;
    use crate::models::stats::ensemble_stats;
    use ndarray::Array2;

    fn constant_volume() -> VolumeGrid {
        VolumeGrid::from_normalized([6, 6, 6], vec![0.5; 216]).unwrap()
    }

    fn ramp_volume() -> VolumeGrid {
        let dims = [6, 6, 6];
        let vals = (0..216)
            .map(|i| {
                let p = crate::grid::vertex_position(dims, i);
                (0.5 + 0.4 * (2.0 * p[0]).sin() * p[1]).clamp(0.0, 1.0)
            })
            .collect();
        VolumeGrid::from_normalized(dims, vals).unwrap()
    }

    fn small_cfg(kind: ModelKind, steps: usize) -> TrainConfig {
        TrainConfig {
            kind,
            steps,
            batch_size: 128,
            seed: 11,
            members: 3,
            encoder: EncoderSpec::Dense {
                resolution: [5, 5, 5],
                features: 4,
            },
            decoder: DecoderSpec {
                hidden: vec![16, 16],
                ..DecoderSpec::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn constant_volume_is_learned() {
        let v = VolumeGrid::from_normalized([8, 8, 8], vec![0.5; 512]).unwrap();
        let coords = v.vertex_positions();
        for kind in [ModelKind::Mdsrn, ModelKind::Rmdsrn] {
            let cfg = TrainConfig {
                batch_size: 1024,
                decoder: DecoderSpec {
                    hidden: vec![32, 32],
                    ..DecoderSpec::default()
                },
                ..small_cfg(kind, 200)
            };
            let (model, history) = train(&v, &cfg).unwrap();
            assert_eq!(history.len(), 200);
            let last = history.last().unwrap();
            assert!(last.member < 1e-4, "{kind}: member loss {}", last.member);
            let st = model.predict_stats(&coords).unwrap();
            let mean_var = st.variance.iter().sum::<f64>() / st.len() as f64;
            assert!(mean_var < 1e-4, "{kind}: mean variance {mean_var}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let v = ramp_volume();
        let cfg = small_cfg(ModelKind::Rmdsrn, 30);
        let (a, ha) = train(&v, &cfg).unwrap();
        let (b, hb) = train(&v, &cfg).unwrap();
        assert_eq!(a.flat_values(), b.flat_values());
        assert_eq!(ha, hb);
    }

    #[test]
    fn zero_lambda_equals_plain_mdsrn() {
        let v = ramp_volume();
        let mut reg = small_cfg(ModelKind::Rmdsrn, 25);
        reg.schedule.lambda_max = 0.0;
        let (a, ha) = train(&v, &reg).unwrap();
        let (b, hb) = train(&v, &small_cfg(ModelKind::Mdsrn, 25)).unwrap();
        assert_eq!(a.flat_values(), b.flat_values());
        assert!(ha.iter().zip(&hb).all(|(x, y)| x.total == y.total && x.lambda == 0.0));
    }

    #[test]
    fn regularization_changes_training() {
        let v = ramp_volume();
        let (a, ha) = train(&v, &small_cfg(ModelKind::Rmdsrn, 25)).unwrap();
        let (b, _) = train(&v, &small_cfg(ModelKind::Mdsrn, 25)).unwrap();
        assert_ne!(a.flat_values(), b.flat_values());
        assert_eq!(ha[0].lambda, 0.0);
        assert!((ha[24].lambda - 10.0).abs() < 1e-12);
        for r in &ha {
            assert!((r.total - (r.member + r.lambda * r.var)).abs() < 1e-12 * r.total.abs().max(1.0));
        }
    }

    #[test]
    fn doubling_identical_decoders_doubles_member_loss() {
        let preds = Array2::from_shape_vec((1, 4), vec![0.1, 0.7, 0.3, 0.9]).unwrap();
        let targets = [0.0, 0.5, 0.5, 1.0];
        let doubled = ndarray::concatenate(Axis(0), &[preds.view(), preds.view()]).unwrap();
        let one = member_loss(preds.view(), &targets).unwrap();
        assert_eq!(member_loss(doubled.view(), &targets).unwrap(), 2.0 * one);
    }

    #[test]
    fn deep_ensemble_members_are_independent() {
        let v = constant_volume();
        let cfg = small_cfg(ModelKind::De, 200);
        let (same, _) = train_deep_ensemble_with_seeds(&v, &cfg, &[5, 5]).unwrap();
        let st = same.predict_stats(&v.vertex_positions()).unwrap();
        assert!(st.variance.iter().all(|&x| x == 0.0));

        let (model, _) = train_deep_ensemble(&v, &TrainConfig { members: 2, ..cfg.clone() }).unwrap();
        let nets = model.networks();
        assert_eq!(model.num_params(), 2 * nets[0].num_params());
        assert_ne!(nets[0].flat_values(), nets[1].flat_values());

        let (single, _) = train_deep_ensemble_with_seeds(&v, &cfg, &[99]).unwrap();
        let base = member_mse(single.networks()[0], &v);
        for n in nets {
            let m = member_mse(n, &v);
            assert!(m < 1e-4, "member mse {m}");
            assert!(m <= 2.0 * base, "member mse {m}, baseline {base}");
        }
    }

    fn member_mse(n: &Srn, v: &VolumeGrid) -> f64 {
        let p = n.predict(&v.vertex_positions()).unwrap();
        p.iter().zip(v.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / v.len() as f64
    }

    #[test]
    fn mcd_and_pv_train() {
        let v = ramp_volume();
        let (mcd, hm) = train(&v, &TrainConfig { dropout: 0.1, ..small_cfg(ModelKind::Mcd, 60) }).unwrap();
        assert!(hm.last().unwrap().member < hm[0].member);
        let st = mcd.predict_stats(&v.vertex_positions()).unwrap();
        assert!(st.variance.iter().any(|&x| x > 0.0));

        let (pv, hp) = train(&v, &small_cfg(ModelKind::Pv, 60)).unwrap();
        assert_eq!(hp[0].lr, 5e-4);
        assert!(hp.last().unwrap().member < hp[0].member);
        assert_eq!(pv.kind(), ModelKind::Pv);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let v = constant_volume();
        assert!(train(&v, &TrainConfig { members: 1, ..small_cfg(ModelKind::Rmdsrn, 5) }).is_err());
        assert!(train(&v, &TrainConfig { dropout: 0.0, ..small_cfg(ModelKind::Mcd, 5) }).is_err());
        assert!(train(&v, &TrainConfig { steps: 0, ..small_cfg(ModelKind::Mdsrn, 5) }).is_err());
        let raw = VolumeGrid::from_raw([2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        assert!(train(&raw, &small_cfg(ModelKind::Mdsrn, 5)).is_err());
    }

    #[test]
    fn ensemble_gradients_match_member_only_path_at_zero_lambda() {
        let cfg = small_cfg(ModelKind::Mdsrn, 1);
        let mut a = init_srn(&cfg, 3, 3, 1, 0.0).unwrap();
        let mut b = a.clone();
        let coords: Vec<[f64; 3]> = (0..10).map(|i| [0.15 * i as f64 - 0.7, -0.2, 0.33]).collect();
        let targets: Vec<f64> = (0..10).map(|i| 0.1 * i as f64).collect();
        ensemble_loss_gradients(&mut a, &coords, &targets, 0.0).unwrap();
        let mut rngs: Vec<_> = (0..3).map(|i| seeded(0, DROPOUT_STREAM + i)).collect();
        accumulate_step(&mut b, &coords, &targets, Mode::Infer, &mut rngs, Objective::Ensemble { lambda: 0.0 })
            .unwrap();
        assert_eq!(a.flat_grads(), b.flat_grads());
        let preds = a.predict(&coords).unwrap();
        let st = ensemble_stats(preds.view()).unwrap();
        assert_eq!(st.len(), 10);
    }
}
