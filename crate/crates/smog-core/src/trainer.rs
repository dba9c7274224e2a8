//! One training iteration end-to-end: augment, momentum assignment, online
//! forward, in-graph group update, loss, backward, optimizer, EMA, detach,
//! periodic reset. Everything is keyed on (seed, iteration) so a run is a
//! pure function of its settings.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::augment::{make_views, AugConfig};
use crate::encoder::{Binder, EncoderPair, NetworkSpec};
use crate::error::{CoreError, Result};
use crate::grouping::{
    beta_schedule, occupancy_stats, FeatureCache, GroupBank, GroupWarning, InitMethod,
    UpdateVariant,
};
use crate::image::ImageBuf;
use crate::loss::{instance_infonce, pure_group_loss, smog_loss, Objective};
use crate::optim::{lr_schedule, step as optim_step, OptimConfig, OptimState};
use crate::rng::{derive, Stream};
use crate::tensor::{Tape, Var};

/// Iterations of sustained >0.9 occupancy before a collapse event is logged.
const COLLAPSE_STREAK: u64 = 50;
const COLLAPSE_SHARE: f64 = 0.9;

/// Everything a run needs beyond the dataset.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub spec: NetworkSpec,
    pub aug: AugConfig,
    pub multi_crop: bool,
    pub objective: Objective,
    pub l: usize,
    pub tau: f64,
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub update_variant: UpdateVariant,
    pub reset_period: u64,
    pub periodic_clustering: bool,
    pub reset_momentum: bool,
    pub symmetrize: bool,
    /// `optim.lr` is the peak LR; the per-iteration value follows the
    /// warmup+cosine schedule.
    pub optim: OptimConfig,
    pub warmup_iters: u64,
    pub total_iters: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub init_batches: usize,
    pub init_method: InitMethod,
}

/// Mutable training state owned by the single trainer thread.
pub struct TrainState {
    pub pair: EncoderPair,
    pub bank: GroupBank,
    pub opt: OptimState,
    pub cache: FeatureCache,
    pub iteration: u64,
    pub collapse_streak: u64,
}

/// One metrics row per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub beta: f64,
    pub max_occupancy: f64,
    pub empty_groups: usize,
    pub ema_drift: f64,
}

/// Out-of-band happenings the caller may want to log.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    CollapseDetected { iteration: u64, max_share: f64 },
    ResetApplied { iteration: u64 },
    GroupWarning(GroupWarning),
}

/// Raw per-step tensors for replay checks.
#[derive(Debug, Clone)]
pub struct StepDebug {
    /// Bank rows before the step.
    pub bank_before: Vec<f64>,
    /// 2N×d online features fed to the in-graph update (empty for Eq. 1).
    pub update_features: Vec<f64>,
    /// Group index per update-feature row (empty for Eq. 1).
    pub update_assignment: Vec<usize>,
    pub beta: f64,
}

/// Center square crop resized to `size`, used for warm-start and evaluation
/// passes where augmentation would add noise.
pub fn center_view(img: &ImageBuf, size: usize) -> ImageBuf {
    let side = img.height.min(img.width);
    let top = (img.height - side) / 2;
    let left = (img.width - side) / 2;
    img.crop_resize(top, left, side, side, size)
}

/// Deterministic per-epoch shuffle of dataset indices.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = derive(seed, Stream::Shuffle, &[epoch]);
    idx.shuffle(&mut rng);
    idx
}

/// Build encoder + optimizer, fill the cache with momentum features of the
/// first `init_batches` batches, and initialize the group bank.
pub fn warm_start(
    settings: &TrainSettings,
    dataset: &[ImageBuf],
) -> Result<(TrainState, Vec<GroupWarning>)> {
    settings.spec.validate()?;
    if settings.batch_size == 0 || dataset.is_empty() {
        return Err(CoreError::Config("empty batch or dataset".into()));
    }
    let mut pair = EncoderPair::build(&settings.spec, settings.alpha, settings.seed)?;
    let d = settings.spec.proj_dim;
    let cache_rows = (settings.reset_period as usize).max(1) * settings.batch_size;
    let mut cache = FeatureCache::new(d, cache_rows);

    for b in 0..settings.init_batches {
        let start = b * settings.batch_size;
        if start >= dataset.len() {
            break;
        }
        let end = (start + settings.batch_size).min(dataset.len());
        let views: Vec<ImageBuf> = dataset[start..end]
            .iter()
            .map(|img| center_view(img, settings.aug.large_size))
            .collect();
        let refs: Vec<&ImageBuf> = views.iter().collect();
        let feats = pair.momentum_project(&refs)?;
        cache.push(&feats);
    }

    let mut warnings = Vec::new();
    let bank = GroupBank::init(
        settings.init_method,
        settings.l,
        d,
        settings.update_variant,
        settings.seed,
        &cache.as_matrix(),
        &mut warnings,
    )?;
    let opt = OptimState::new(&pair.online.store);
    Ok((
        TrainState {
            pair,
            bank,
            opt,
            cache,
            iteration: 0,
            collapse_streak: 0,
        },
        warnings,
    ))
}

fn collapse_diagnosis(err: CoreError, bank: &GroupBank, assignment: &[usize]) -> CoreError {
    if matches!(err, CoreError::ZeroVector { .. }) {
        let stats = occupancy_stats(assignment, bank.l);
        CoreError::Internal(alloc::format!(
            "{err}; occupancy max_share={:.3} empty_groups={}",
            stats.max_share,
            stats.empty_groups
        ))
    } else {
        err
    }
}

/// Run one training iteration over `batch` (dataset index, image) pairs and
/// advance the state. `epoch` is carried into the metrics row only.
pub fn train_step(
    state: &mut TrainState,
    settings: &TrainSettings,
    batch: &[(u64, &ImageBuf)],
    epoch: u64,
) -> Result<(MetricsRecord, Vec<TrainEvent>, StepDebug)> {
    let t = state.iteration;
    let n = batch.len();
    if n < 2 {
        return Err(CoreError::InsufficientNegatives { n });
    }
    let mut events = Vec::new();
    let bank_before = state.bank.groups.clone();

    // (1) augment
    let mut aug = settings.aug.clone();
    if !settings.multi_crop {
        aug.n_small = 0;
    }
    let mut large_a = Vec::with_capacity(n);
    let mut large_b = Vec::with_capacity(n);
    let mut smalls: Vec<Vec<ImageBuf>> = vec![Vec::with_capacity(n); aug.n_small];
    for &(idx, img) in batch {
        let views = make_views(img, idx, t, settings.seed, &aug)?;
        let [va, vb] = views.large;
        large_a.push(va);
        large_b.push(vb);
        for (s, view) in views.small.into_iter().enumerate() {
            smalls[s].push(view);
        }
    }

    // (2) momentum forward on the large views
    let refs_a: Vec<&ImageBuf> = large_a.iter().collect();
    let refs_b: Vec<&ImageBuf> = large_b.iter().collect();
    let feats_a = state
        .pair
        .momentum_project(&refs_a)
        .map_err(|e| collapse_diagnosis(e, &state.bank, &[]))?;
    let feats_b = state
        .pair
        .momentum_project(&refs_b)
        .map_err(|e| collapse_diagnosis(e, &state.bank, &[]))?;

    // (3) assignments
    let c_a = state.bank.assign(&feats_a);
    let c_b = state.bank.assign(&feats_b);

    // (4) online forward on all anchor views (shared tape + binder, so each
    // parameter is one node accumulating gradient from every view)
    let mut tape = Tape::new();
    let mut binder = Binder::new(&state.pair.online.store);
    let fwd = |state: &mut TrainState,
               tape: &mut Tape,
               binder: &mut Binder,
               refs: &[&ImageBuf]|
     -> Result<Var> {
        let out = state.pair.forward_online(tape, binder, refs, true)?;
        Ok(out.pred.unwrap_or(out.proj))
    };
    let pred_a = fwd(state, &mut tape, &mut binder, &refs_a)
        .map_err(|e| collapse_diagnosis(e, &state.bank, &c_a))?;
    let pred_b = fwd(state, &mut tape, &mut binder, &refs_b)
        .map_err(|e| collapse_diagnosis(e, &state.bank, &c_b))?;
    let mut pred_small = Vec::with_capacity(aug.n_small);
    for views in &smalls {
        let refs: Vec<&ImageBuf> = views.iter().collect();
        let p = fwd(state, &mut tape, &mut binder, &refs)
            .map_err(|e| collapse_diagnosis(e, &state.bank, &c_a))?;
        pred_small.push(p);
    }

    let beta = beta_schedule(t, settings.total_iters, settings.beta_start, settings.beta_end)?;
    let uses_bank = settings.objective != Objective::InstanceNce;

    // (5) in-graph Eq. 4 update on the large-view online features
    let mut update_features = Vec::new();
    let mut update_assignment = Vec::new();
    let update = if uses_bank {
        let features = tape.concat_rows(&[pred_a, pred_b])?;
        update_features = tape.value(features).to_vec();
        update_assignment = c_a.iter().chain(c_b.iter()).copied().collect();
        let mut rs_rng = derive(settings.seed, Stream::RandomSelect, &[t]);
        Some(state.bank.update_in_graph(
            &mut tape,
            features,
            &update_assignment,
            beta,
            &mut rs_rng,
        )?)
    } else {
        None
    };

    // (6) loss
    let loss = match settings.objective {
        Objective::InstanceNce => {
            let shape = [n, state.bank.d];
            let tgt_b = tape.leaf(&shape, feats_b.clone());
            let mut losses = vec![instance_infonce(&mut tape, pred_a, tgt_b, settings.tau)?];
            if settings.symmetrize {
                let tgt_a = tape.leaf(&shape, feats_a.clone());
                losses.push(instance_infonce(&mut tape, pred_b, tgt_a, settings.tau)?);
            }
            mean_of(&mut tape, &losses)?
        }
        Objective::PureGroup => {
            let bank_var = update.as_ref().unwrap().updated;
            let mut losses = vec![pure_group_loss(&mut tape, &c_a, &c_b, bank_var, settings.tau)?];
            if settings.symmetrize {
                losses.push(pure_group_loss(&mut tape, &c_b, &c_a, bank_var, settings.tau)?);
            }
            mean_of(&mut tape, &losses)?
        }
        Objective::Smog => {
            let bank_var = update.as_ref().unwrap().updated;
            // each anchor contrasts against the other stream's assignment
            let mut losses = vec![smog_loss(&mut tape, pred_a, &c_b, bank_var, settings.tau)?];
            if settings.symmetrize {
                losses.push(smog_loss(&mut tape, pred_b, &c_a, bank_var, settings.tau)?);
            }
            for (s, &p) in pred_small.iter().enumerate() {
                let target = if s % 2 == 0 { &c_b } else { &c_a };
                if s % 2 == 1 && !settings.symmetrize {
                    continue;
                }
                losses.push(smog_loss(&mut tape, p, target, bank_var, settings.tau)?);
            }
            mean_of(&mut tape, &losses)?
        }
    };
    let loss_value = tape.value(loss)[0];

    // (7) backward
    tape.backward(loss)
        .map_err(|e| collapse_diagnosis(e, &state.bank, &update_assignment))?;

    // (8) optimizer step at the scheduled LR
    let lr = lr_schedule(t, settings.total_iters, settings.warmup_iters, settings.optim.lr)?;
    let mut grads: Vec<Option<Vec<f64>>> =
        vec![None; state.pair.online.store.entries().len()];
    for (id, var) in binder.bound() {
        grads[id] = tape.grad(var).map(|g| g.to_vec());
    }
    let step_cfg = OptimConfig {
        lr,
        ..settings.optim.clone()
    };
    optim_step(&mut state.pair.online.store, &mut state.opt, &grads, &step_cfg)?;

    // (9) EMA
    state.pair.ema_update(settings.alpha)?;

    // (10) detach + renormalize bank, cache push
    if let Some(up) = &update {
        state.bank.commit(&tape, up);
        state.cache.push(&feats_a);
    }

    // (11) periodic reset
    if uses_bank && settings.reset_period > 0 && t > 0 && t % settings.reset_period == 0 {
        let warnings = state.bank.periodic_reset(
            &state.cache,
            &mut state.pair,
            settings.periodic_clustering,
            settings.reset_momentum,
            settings.seed,
            t,
        );
        if settings.periodic_clustering || settings.reset_momentum {
            events.push(TrainEvent::ResetApplied { iteration: t });
        }
        events.extend(warnings.into_iter().map(TrainEvent::GroupWarning));
    }

    // (12) metrics + collapse watch
    let stats = occupancy_stats(&update_assignment, state.bank.l);
    if uses_bank && stats.max_share > COLLAPSE_SHARE {
        state.collapse_streak += 1;
        if state.collapse_streak == COLLAPSE_STREAK {
            events.push(TrainEvent::CollapseDetected {
                iteration: t,
                max_share: stats.max_share,
            });
        }
    } else {
        state.collapse_streak = 0;
    }

    let record = MetricsRecord {
        iteration: t,
        epoch,
        loss: loss_value,
        lr,
        beta,
        max_occupancy: stats.max_share,
        empty_groups: stats.empty_groups,
        ema_drift: state.pair.ema_drift(),
    };
    state.iteration += 1;
    Ok((
        record,
        events,
        StepDebug {
            bank_before,
            update_features,
            update_assignment,
            beta,
        },
    ))
}

fn mean_of(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.add(acc, l)?;
    }
    Ok(tape.scale(acc, 1.0 / losses.len() as f64))
}

/// Frozen online-backbone features for the whole dataset (center views),
/// processed in batches. Returns N×D_b rows.
pub fn dataset_features(
    pair: &mut EncoderPair,
    images: &[ImageBuf],
    view_size: usize,
    batch: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in images.chunks(batch.max(1)) {
        let views: Vec<ImageBuf> = chunk.iter().map(|i| center_view(i, view_size)).collect();
        let refs: Vec<&ImageBuf> = views.iter().collect();
        out.extend(pair.eval_backbone_features(&refs)?);
    }
    Ok(out)
}

/// Momentum-projection group assignment of the whole dataset (center views).
pub fn dataset_assignments(
    pair: &mut EncoderPair,
    bank: &GroupBank,
    images: &[ImageBuf],
    view_size: usize,
    batch: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for chunk in images.chunks(batch.max(1)) {
        let views: Vec<ImageBuf> = chunk.iter().map(|i| center_view(i, view_size)).collect();
        let refs: Vec<&ImageBuf> = views.iter().collect();
        // eval-mode BN (running stats): assignments must be a pure function
        // of the image, not of how the dataset happens to be batched
        let feats = pair.momentum_project_eval(&refs)?;
        out.extend(bank.assign(&feats));
    }
    Ok(out)
}

impl TrainSettings {
    /// Small-but-real defaults for the 32×32 synthetic benchmark.
    pub fn desk_default() -> Self {
        TrainSettings {
            spec: NetworkSpec::desk_default(),
            aug: AugConfig::desk_default(),
            multi_crop: true,
            objective: Objective::Smog,
            l: 32,
            tau: 0.1,
            alpha: 0.9,
            beta_start: 1.0,
            beta_end: 0.99,
            update_variant: UpdateVariant::MomentumUpdate,
            reset_period: 25,
            periodic_clustering: true,
            reset_momentum: true,
            symmetrize: true,
            optim: OptimConfig::desk_default(),
            warmup_iters: 10,
            total_iters: 400,
            batch_size: 128,
            seed: 0,
            init_batches: 8,
            init_method: InitMethod::Kmeans,
        }
    }
}

/// Human-readable one-liner for an event, used by the CLI log.
pub fn describe_event(e: &TrainEvent) -> String {
    match e {
        TrainEvent::CollapseDetected {
            iteration,
            max_share,
        } => alloc::format!(
            "collapse detected at iteration {iteration}: max occupancy {max_share:.3}"
        ),
        TrainEvent::ResetApplied { iteration } => {
            alloc::format!("periodic reset applied at iteration {iteration}")
        }
        TrainEvent::GroupWarning(w) => alloc::format!("group warning: {w:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::BackboneKind;
    use rand::Rng;

    fn tiny_settings() -> TrainSettings {
        let mut s = TrainSettings::desk_default();
        s.spec = NetworkSpec {
            backbone: BackboneKind::TinyCnn,
            widths: vec![4, 8],
            input_channels: 3,
            mlp_input_dim: 0,
            proj_hidden: 16,
            proj_dim: 8,
            pred_hidden: 16,
        };
        s.l = 4;
        s.batch_size = 6;
        s.total_iters = 20;
        s.warmup_iters = 2;
        s.reset_period = 8;
        s.init_batches = 2;
        s.multi_crop = false;
        s.optim.lr = 0.05;
        s
    }

    fn tiny_dataset(n: usize, seed: u64) -> Vec<ImageBuf> {
        let mut rng = derive(seed, Stream::Synthesis, &[7]);
        (0..n)
            .map(|_| {
                let mut img = ImageBuf::zeros(3, 32, 32);
                for v in img.data.iter_mut() {
                    *v = rng.random_range(0.0..1.0);
                }
                img
            })
            .collect()
    }

    fn run_steps(settings: &TrainSettings, data: &[ImageBuf], steps: usize) -> Vec<MetricsRecord> {
        let (mut state, _) = warm_start(settings, data).unwrap();
        let mut out = Vec::new();
        for t in 0..steps {
            let start = (t * settings.batch_size) % data.len();
            let batch: Vec<(u64, &ImageBuf)> = (0..settings.batch_size)
                .map(|i| {
                    let idx = (start + i) % data.len();
                    (idx as u64, &data[idx])
                })
                .collect();
            let (rec, _, _) = train_step(&mut state, settings, &batch, 0).unwrap();
            out.push(rec);
        }
        out
    }

    #[test]
    fn identical_runs_produce_identical_metrics() {
        let settings = tiny_settings();
        let data = tiny_dataset(12, 1);
        let a = run_steps(&settings, &data, 3);
        let b = run_steps(&settings, &data, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn eq1_objective_leaves_bank_untouched() {
        let mut settings = tiny_settings();
        settings.objective = Objective::InstanceNce;
        let data = tiny_dataset(12, 2);
        let (mut state, _) = warm_start(&settings, &data).unwrap();
        let before = state.bank.groups.clone();
        let counts_before = state.bank.counts.clone();
        let batch: Vec<(u64, &ImageBuf)> =
            (0..6).map(|i| (i as u64, &data[i])).collect();
        train_step(&mut state, &settings, &batch, 0).unwrap();
        assert_eq!(state.bank.groups, before);
        assert_eq!(state.bank.counts, counts_before);
    }

    #[test]
    fn bank_rows_move_toward_member_mean() {
        let mut settings = tiny_settings();
        settings.beta_start = 0.5;
        settings.beta_end = 0.5;
        let data = tiny_dataset(12, 3);
        let (mut state, _) = warm_start(&settings, &data).unwrap();
        let batch: Vec<(u64, &ImageBuf)> =
            (0..6).map(|i| (i as u64, &data[i])).collect();
        let (_, _, dbg) = train_step(&mut state, &settings, &batch, 0).unwrap();
        let d = state.bank.d;
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = libm::sqrt(a.iter().map(|x| x * x).sum());
            let nb: f64 = libm::sqrt(b.iter().map(|x| x * x).sum());
            dot / (na * nb)
        };
        let mut checked = 0;
        for k in 0..state.bank.l {
            let members: Vec<usize> = dbg
                .update_assignment
                .iter()
                .enumerate()
                .filter(|(_, &g)| g == k)
                .map(|(i, _)| i)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; d];
            for &i in &members {
                for j in 0..d {
                    mean[j] += dbg.update_features[i * d + j] / members.len() as f64;
                }
            }
            let old = &dbg.bank_before[k * d..(k + 1) * d];
            let new = &state.bank.groups[k * d..(k + 1) * d];
            assert!(
                cos(new, &mean) > cos(old, &mean) - 1e-12,
                "group {k} did not move toward its member mean"
            );
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn committed_bank_replays_eq4_exactly() {
        let settings = tiny_settings();
        let data = tiny_dataset(12, 4);
        let (mut state, _) = warm_start(&settings, &data).unwrap();
        let batch: Vec<(u64, &ImageBuf)> =
            (0..6).map(|i| (i as u64, &data[i])).collect();
        let (_, _, dbg) = train_step(&mut state, &settings, &batch, 0).unwrap();
        let d = state.bank.d;
        for k in 0..state.bank.l {
            let members: Vec<usize> = dbg
                .update_assignment
                .iter()
                .enumerate()
                .filter(|(_, &g)| g == k)
                .map(|(i, _)| i)
                .collect();
            let old = &dbg.bank_before[k * d..(k + 1) * d];
            let mut expect: Vec<f64> = if members.is_empty() {
                old.to_vec()
            } else {
                let mut mean = vec![0.0; d];
                for &i in &members {
                    for j in 0..d {
                        mean[j] += dbg.update_features[i * d + j] / members.len() as f64;
                    }
                }
                (0..d)
                    .map(|j| dbg.beta * old[j] + (1.0 - dbg.beta) * mean[j])
                    .collect()
            };
            let norm: f64 = libm::sqrt(expect.iter().map(|x| x * x).sum());
            for v in expect.iter_mut() {
                *v /= norm;
            }
            for (got, want) in state.bank.groups[k * d..(k + 1) * d].iter().zip(&expect) {
                assert!((got - want).abs() < 1e-9, "group {k} mismatch");
            }
        }
    }

    #[test]
    fn bank_rows_stay_unit_norm_across_steps() {
        let settings = tiny_settings();
        let data = tiny_dataset(12, 5);
        let (mut state, _) = warm_start(&settings, &data).unwrap();
        for t in 0..3u64 {
            let batch: Vec<(u64, &ImageBuf)> =
                (0..6).map(|i| ((i + t as usize) as u64 % 12, &data[(i + t as usize) % 12])).collect();
            train_step(&mut state, &settings, &batch, 0).unwrap();
            for k in 0..state.bank.l {
                let row = &state.bank.groups[k * state.bank.d..(k + 1) * state.bank.d];
                let n: f64 = libm::sqrt(row.iter().map(|x| x * x).sum());
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn epoch_permutation_is_reproducible_and_complete() {
        let a = epoch_permutation(9, 3, 100);
        let b = epoch_permutation(9, 3, 100);
        assert_eq!(a, b);
        assert_ne!(a, epoch_permutation(9, 4, 100));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn warm_start_without_cache_falls_back_with_warning() {
        let mut settings = tiny_settings();
        settings.init_batches = 0;
        let data = tiny_dataset(12, 6);
        let (_, warnings) = warm_start(&settings, &data).unwrap();
        assert!(matches!(
            warnings[0],
            GroupWarning::KmeansFallback { .. }
        ));
    }

    #[test]
    fn loss_is_finite_and_drift_grows_from_zero() {
        let settings = tiny_settings();
        let data = tiny_dataset(12, 8);
        let recs = run_steps(&settings, &data, 2);
        assert!(recs.iter().all(|r| r.loss.is_finite()));
        // drift is 0 at build time and becomes positive once θ moves
        assert!(recs[1].ema_drift > 0.0);
    }
}
