//! AdamW, the learning-rate schedule and teacher-forced training loops.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{entry_selection, BankEntry};
use crate::error::{Error, Result};
use crate::model::{bind, BaseWeights, ParamRef, Selection, Token, Trainable};
use crate::numerics::{GradCheckOptions, GradCheckReport, Gradients, Tape, Tensor, Var};
use crate::synth::{derive_seed, Utterance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    BaseAll,
    AdaptersOnly,
    AdaptersAndGate,
}

impl TrainScope {
    fn trainable(self) -> Trainable {
        match self {
            TrainScope::BaseAll => Trainable { base: true, adapters: false, gates: false },
            TrainScope::AdaptersOnly => Trainable { base: false, adapters: true, gates: false },
            TrainScope::AdaptersAndGate => Trainable { base: false, adapters: true, gates: true },
        }
    }

    /// The language-token target is learned only when the base itself is
    /// trained; adapters never see it.
    pub fn learns_language_id(self) -> bool {
        self == TrainScope::BaseAll
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub trainable_scope: TrainScope,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Multiplier on the learning rate of mixture gate logits.
    #[serde(default = "unit")]
    pub gate_lr_scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            epochs: 10,
            batch_size: 16,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            trainable_scope: TrainScope::AdaptersOnly,
            clip_norm: Some(1.0),
            gate_lr_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.into()));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("weight_decay must be >= 0 and eps > 0");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.gate_lr_scale > 0.0 && self.gate_lr_scale.is_finite()) {
            return bad("gate_lr_scale must be positive");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        Ok(())
    }
}

/// Linear warmup over `round(warmup_fraction · total)` steps, then linear
/// decay to zero at `total`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Contract("lr_schedule needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Contract(format!("step {step} beyond {total_steps}")));
    }
    let warm = (cfg.warmup_fraction * total_steps as f64).round() as usize;
    let warm = warm.min(total_steps - 1);
    if warm > 0 && step <= warm {
        return Ok(cfg.peak_lr * step as f64 / warm as f64);
    }
    Ok(cfg.peak_lr * (total_steps - step) as f64 / (total_steps - warm) as f64)
}

/// Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn for_params(params: &[&mut Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self { t: 0, m: zeros(), v: zeros() }
    }
}

/// One AdamW update: decoupled decay `p -= lr·wd·p`, then the bias-corrected
/// Adam step. Nothing is modified if any gradient is non-finite.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    adamw_update(params, grads, state, &vec![lr; params.len()], cfg)
}

/// [`adamw_step`] with a learning rate per parameter tensor.
fn adamw_update(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lrs: &[f64], cfg: &TrainConfig) -> Result<()> {
    if params.len() != lrs.len() || params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Dimension(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::Dimension(format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("gradient of parameter {i}")));
        }
    }
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lr = lrs[i];
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *w -= lr * cfg.weight_decay * *w;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
    /// Token-weighted mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }
}

/// Decoder input and per-position targets for one utterance.
/// Input: `[SOT, LANG(k), TASK] ++ text[..n-1]`. Targets: the language token
/// (only if `lid`), nothing for `TASK`, then the text including `EOT`.
pub fn teacher_forcing(base: &BaseWeights, utt: &Utterance, lid: bool) -> Result<(Vec<Token>, Vec<Option<usize>>)> {
    if utt.text.is_empty() {
        return Err(Error::Contract("utterance without text".into()));
    }
    let prompt = base.config().prompt(utt.lang.index)?;
    let mut input: Vec<Token> = prompt.to_vec();
    input.extend_from_slice(&utt.text[..utt.text.len() - 1]);
    let mut targets = vec![lid.then_some(prompt[1] as usize), None];
    targets.extend(utt.text.iter().map(|&t| Some(t as usize)));
    Ok((input, targets))
}

/// Summed token NLL of a batch on `tape`, with the target count.
fn batch_nll<'p>(
    tape: &mut Tape<'p>,
    base: &'p BaseWeights,
    sel: &Selection<'p>,
    batch: &[&'p Utterance],
    trainable: Trainable,
    lid: bool,
) -> Result<(Var, usize)> {
    let bound = bind(tape, base, sel, trainable)?;
    let net = base.net(&bound);
    let mut total: Option<Var> = None;
    let mut count = 0;
    for utt in batch {
        let (input, targets) = teacher_forcing(base, utt, lid)?;
        count += targets.iter().filter(|t| t.is_some()).count();
        let x = tape.constant(&utt.frames);
        let h = net.encode(tape, x)?;
        let logits = net.decode(tape, &input, h)?;
        let nll = tape.cross_entropy(logits, &targets)?;
        total = Some(match total {
            None => nll,
            Some(t) => tape.add(t, nll)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    Ok((total, count))
}

/// Mean token cross-entropy of `corpus` under `sel`, without updating anything.
pub fn corpus_loss(base: &BaseWeights, sel: &Selection<'_>, corpus: &[Utterance], lid: bool) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Contract("empty corpus".into()));
    }
    let (mut sum, mut count) = (0.0, 0);
    for chunk in corpus.chunks(32) {
        let mut tape = Tape::new();
        let batch: Vec<&Utterance> = chunk.iter().collect();
        let (nll, n) = batch_nll(&mut tape, base, sel, &batch, Trainable::default(), lid)?;
        sum += tape.scalar(nll);
        count += n;
    }
    Ok(sum / count as f64)
}

/// What a training loop updates.
enum Subject<'a> {
    Base(&'a mut BaseWeights),
    Entry { base: &'a BaseWeights, entry: &'a mut BankEntry, donor: Option<&'a BankEntry> },
}

impl Subject<'_> {
    fn base(&self) -> &BaseWeights {
        match self {
            Subject::Base(b) => b,
            Subject::Entry { base, .. } => base,
        }
    }

    /// Mean loss and gradients (of the mean) for one batch.
    fn grads(&self, batch: &[&Utterance], scope: TrainScope) -> Result<(f64, usize, Gradients)> {
        let base = self.base();
        let sel = match self {
            Subject::Base(_) => Selection::base(),
            Subject::Entry { base, entry, donor } => entry_selection(&base.config().dims(), entry, *donor)?,
        };
        let mut tape = Tape::new();
        let (nll, count) = batch_nll(&mut tape, base, &sel, batch, scope.trainable(), scope.learns_language_id())?;
        if count == 0 {
            return Err(Error::Contract("batch has no targets".into()));
        }
        let mean = tape.scale(nll, 1.0 / count as f64)?;
        let loss = tape.scalar(mean);
        Ok((loss, count, tape.backward(mean)?))
    }

    /// Trainable tensors with their tape ids, sorted by id.
    fn params_mut(&mut self, scope: TrainScope) -> Vec<(usize, &mut Tensor)> {
        match self {
            Subject::Base(b) => b.tensors_mut().iter_mut().enumerate().collect(),
            Subject::Entry { base, entry, .. } => {
                let n_base = base.num_tensors();
                let dims = base.config().dims();
                let slots: Vec<usize> = entry
                    .adapters
                    .iter()
                    .map(|a| dims.slot(a.site.layer, a.site.component, a.site.matrix).expect("entry checked against model"))
                    .collect();
                let mut out = Vec::new();
                for (ad, &s) in entry.adapters.iter_mut().zip(&slots) {
                    out.push((ParamRef::AdapterA(s).id(n_base), &mut ad.a));
                    out.push((ParamRef::AdapterB(s).id(n_base), &mut ad.b));
                }
                if scope == TrainScope::AdaptersAndGate {
                    if let Some(m) = &mut entry.mixture {
                        for (g, &s) in m.gates.iter_mut().zip(&slots) {
                            out.push((ParamRef::Gate(s).id(n_base), &mut g.logits));
                        }
                    }
                }
                out.sort_by_key(|(id, _)| *id);
                out
            }
        }
    }

    fn snap(&mut self) {
        match self {
            Subject::Base(b) => b.snap_to_f32(),
            Subject::Entry { entry, .. } => entry.snap_to_f32(),
        }
    }
}

fn check_scope(subject: &Subject<'_>, scope: TrainScope) -> Result<()> {
    match (subject, scope) {
        (Subject::Base(_), TrainScope::BaseAll) => Ok(()),
        (Subject::Entry { .. }, TrainScope::AdaptersOnly) => Ok(()),
        (Subject::Entry { entry, .. }, TrainScope::AdaptersAndGate) if entry.mixture.is_some() => Ok(()),
        (Subject::Entry { .. }, TrainScope::AdaptersAndGate) => {
            Err(Error::Contract("adapters_and_gate scope needs a mixture entry".into()))
        }
        _ => Err(Error::Contract(format!("scope {scope:?} does not match the trained artifact"))),
    }
}

fn run(mut subject: Subject<'_>, corpus: &[Utterance], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_scope(&subject, cfg.trainable_scope)?;
    if corpus.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let n_batches = corpus.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * n_batches;
    let n_base = match &subject {
        Subject::Base(b) => b.num_tensors(),
        Subject::Entry { base, .. } => base.num_tensors(),
    };
    let is_gate = |id: usize| matches!(ParamRef::from_id(id, n_base), ParamRef::Gate(_));
    let mut state: Option<AdamState> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("epoch/{epoch}"))));
        let (mut epoch_sum, mut epoch_count) = (0.0, 0);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Utterance> = idx.iter().map(|&i| &corpus[i]).collect();
            let outcome = subject.grads(&batch, cfg.trainable_scope).and_then(|(loss, count, grads)| {
                let lr = lr_schedule(step + 1, total + 1, cfg)?;
                let mut params = subject.params_mut(cfg.trainable_scope);
                let mut g: Vec<Tensor> = params
                    .iter()
                    .map(|(id, p)| grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
                    .collect();
                if let Some(max) = cfg.clip_norm {
                    clip_global_norm(&mut g, max);
                }
                let lrs: Vec<f64> = params
                    .iter()
                    .map(|(id, _)| if is_gate(*id) { lr * cfg.gate_lr_scale } else { lr })
                    .collect();
                let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|(_, p)| &mut **p).collect();
                let st = state.get_or_insert_with(|| AdamState::for_params(&refs));
                adamw_update(&mut refs, &g, st, &lrs, cfg)?;
                Ok((loss, count, lr))
            });
            let (loss, count, lr) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    subject.snap();
                    return Err(e);
                }
            };
            report.records.push(LossRecord { epoch, step, lr, loss });
            epoch_sum += loss * count as f64;
            epoch_count += count;
            step += 1;
        }
        report.epoch_losses.push(epoch_sum / epoch_count as f64);
    }
    report.steps = step;
    subject.snap();
    Ok(report)
}

fn clip_global_norm(grads: &mut [Tensor], max: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Trains every base tensor (scope must be `base_all`).
pub fn train_base(base: &mut BaseWeights, corpus: &[Utterance], cfg: &TrainConfig) -> Result<TrainReport> {
    run(Subject::Base(base), corpus, cfg)
}

/// Trains one bank entry against a frozen base. `donor` is required for a
/// mixture entry and is never modified.
pub fn train_entry(
    base: &BaseWeights,
    entry: &mut BankEntry,
    donor: Option<&BankEntry>,
    corpus: &[Utterance],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let dims = base.config().dims();
    for ad in &entry.adapters {
        if dims.slot(ad.site.layer, ad.site.component, ad.site.matrix).is_none() {
            return Err(Error::Contract(format!("site {} not in model", ad.site)));
        }
    }
    entry_selection(&dims, entry, donor)?;
    run(Subject::Entry { base, entry, donor }, corpus, cfg)
}

fn param_at<'a>(base: &'a mut BaseWeights, entry: Option<&'a mut BankEntry>, id: usize) -> Option<&'a mut Tensor> {
    let n_base = base.num_tensors();
    let dims = base.config().dims();
    let r = ParamRef::from_id(id, n_base);
    if let ParamRef::Base(i) = r {
        return base.tensors_mut().get_mut(i);
    }
    let entry = entry?;
    let pos = entry
        .adapters
        .iter()
        .position(|a| dims.slot(a.site.layer, a.site.component, a.site.matrix) == Some(match r {
            ParamRef::AdapterA(s) | ParamRef::AdapterB(s) | ParamRef::Gate(s) => s,
            ParamRef::Base(_) => unreachable!(),
        }))?;
    match r {
        ParamRef::AdapterA(_) => Some(&mut entry.adapters[pos].a),
        ParamRef::AdapterB(_) => Some(&mut entry.adapters[pos].b),
        _ => entry.mixture.as_mut().map(|m| &mut m.gates[pos].logits),
    }
}

/// Finite-difference check of the mean training loss of one batch, over the
/// parameters `scope` makes trainable. Reported names are tape roles such as
/// `base/encoder.pos` or `adapter_a/12` (by slot).
pub fn grad_check_batch(
    base: &BaseWeights,
    entry: Option<(&BankEntry, Option<&BankEntry>)>,
    batch: &[Utterance],
    scope: TrainScope,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let refs: Vec<&Utterance> = batch.iter().collect();
    let donor = entry.and_then(|(_, d)| d);
    let mut base_w = base.clone();
    let mut entry_w = entry.map(|(e, _)| e.clone());
    let loss_and_grads = |b: &BaseWeights, e: Option<&BankEntry>| -> Result<(f64, Gradients)> {
        let sel = match e {
            None => Selection::base(),
            Some(e) => entry_selection(&b.config().dims(), e, donor)?,
        };
        let mut tape = Tape::new();
        let (nll, count) = batch_nll(&mut tape, b, &sel, &refs, scope.trainable(), scope.learns_language_id())?;
        let mean = tape.scale(nll, 1.0 / count.max(1) as f64)?;
        Ok((tape.scalar(mean), tape.backward(mean)?))
    };
    let ids: Vec<usize> = {
        let s = match &mut entry_w {
            None => Subject::Base(&mut base_w),
            Some(e) => Subject::Entry { base, entry: e, donor },
        };
        check_scope(&s, scope)?;
        let mut s = s;
        s.params_mut(scope).into_iter().map(|(id, _)| id).collect()
    };
    let (_, analytic) = loss_and_grads(&base_w, entry_w.as_ref())?;
    let n_base = base.num_tensors();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_param_err = BTreeMap::new();
    let mut max_rel_err: f64 = 0.0;
    for id in ids {
        let len = param_at(&mut base_w, entry_w.as_mut(), id).map_or(0, |p| p.len());
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < len => {
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let mut worst: f64 = 0.0;
        for c in coords {
            let orig = param_at(&mut base_w, entry_w.as_mut(), id).unwrap().data()[c];
            let mut at = |v: f64| -> Result<f64> {
                param_at(&mut base_w, entry_w.as_mut(), id).unwrap().data_mut()[c] = v;
                Ok(loss_and_grads(&base_w, entry_w.as_ref())?.0)
            };
            let up = at(orig + opts.eps)?;
            let down = at(orig - opts.eps)?;
            at(orig)?;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[c]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.rel_floor);
            worst = worst.max(rel);
        }
        let name = match ParamRef::from_id(id, n_base) {
            ParamRef::Base(i) => format!("base/{}", base.tensor_names().nth(i).unwrap_or("?")),
            ParamRef::AdapterA(s) => format!("adapter_a/{s}"),
            ParamRef::AdapterB(s) => format!("adapter_b/{s}"),
            ParamRef::Gate(s) => format!("gate/{s}"),
        };
        max_rel_err = max_rel_err.max(worst);
        per_param_err.insert(name, worst);
    }
    Ok(GradCheckReport { max_rel_err, per_param_err, tolerance: opts.tolerance, passed: max_rel_err <= opts.tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig { peak_lr: 2.0, ..Default::default() };
        assert_eq!(lr_schedule(0, 100, &cfg).unwrap(), 0.0);
        assert_eq!(lr_schedule(10, 100, &cfg).unwrap(), 2.0);
        assert_eq!(lr_schedule(5, 100, &cfg).unwrap(), 1.0);
        assert_eq!(lr_schedule(100, 100, &cfg).unwrap(), 0.0);
        assert_eq!(lr_schedule(55, 100, &cfg).unwrap(), 1.0);
        assert!(lr_schedule(0, 0, &cfg).is_err());
        let max = (0..=100).map(|s| lr_schedule(s, 100, &cfg).unwrap()).fold(0.0, f64::max);
        assert_eq!(max, 2.0);
    }

    #[test]
    fn zero_grad_without_decay_is_fixed_point() {
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = Tensor::row_vector(vec![1.5, -2.0]);
        let before = p.clone();
        let mut params = vec![&mut p];
        let mut st = AdamState::for_params(&params);
        adamw_step(&mut params, &[Tensor::zeros(1, 2)], &mut st, 0.1, &cfg).unwrap();
        assert_eq!(st.t, 1);
        assert_eq!(p, before);
    }

    #[test]
    fn decoupled_decay_alone() {
        let cfg = TrainConfig { weight_decay: 0.01, ..Default::default() };
        let w = 3.0;
        let mut p = Tensor::scalar(w);
        let mut params = vec![&mut p];
        let mut st = AdamState::for_params(&params);
        adamw_step(&mut params, &[Tensor::scalar(0.0)], &mut st, 0.5, &cfg).unwrap();
        assert_eq!(p.data()[0], w - 0.5 * 0.01 * w);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::scalar(1.0);
        let mut params = vec![&mut p];
        let mut st = AdamState::for_params(&params);
        let r = adamw_step(&mut params, &[Tensor::scalar(f64::NAN)], &mut st, 0.1, &cfg);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert_eq!(st.t, 0);
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn config_guards() {
        assert!(TrainConfig { peak_lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { warmup_fraction: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
