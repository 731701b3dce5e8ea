//! Alternating stage-2 trainer: refresh the variational densities on the
//! current latents, then take one model step on the per-view conditional
//! VAEs with the information penalty attached. Stage-1 artifacts enter
//! only as data (consistent codes and pseudo-labels) and stay frozen.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::bound::{mi_upper_bound, q_fit_step, r_fit_step, VariationalConditional};
use super::gaussian::{
    encode_specific, kl_std_normal, reconstruction_loss, reparameterize, standard_normal,
    GaussianLatent,
};
use super::{DisResult, DisentangleError, MixtureOfGaussians, Stage2Config};
use crate::consistency::{minibatches, ClusterAssignment};
use crate::datasets::MultiViewBatch;
use crate::ndgrad::{Adam, AdamParams, NdError, Tape, Tensor, Var};
use crate::nn::{grads_for, Activation, Mlp};
use crate::scalar::Scalar;

/// What the decoder sees alongside the latent sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CondMode {
    /// One-hot pseudo-label from stage 1.
    PseudoLabel,
    /// The consistent code itself.
    Consistent,
    /// Pseudo-label one-hot concatenated with the consistent code.
    Both,
}

/// One view's conditional VAE.
#[derive(Clone, Debug)]
pub struct ViewCvae<F: Scalar> {
    /// d_v -> hidden... -> 2 d_z (mean and log-std halves).
    pub encoder: Mlp<F>,
    /// d_z + cond_dim -> reversed hidden... -> d_v.
    pub decoder: Mlp<F>,
}

/// Everything stage 2 learns.
#[derive(Clone, Debug)]
pub struct Stage2State<F: Scalar> {
    pub views: Vec<ViewCvae<F>>,
    /// Per-view conditional density of the latent given the code.
    pub conditionals: Vec<VariationalConditional<F>>,
    /// Per-view marginal over the latent.
    pub mixtures: Vec<MixtureOfGaussians<F>>,
    /// `[classes, d_e]` mean consistent code per pseudo-class; the
    /// conditioning surrogate when sampling in code-conditioned modes.
    pub class_prototypes: Tensor<F>,
    pub cond_mode: CondMode,
    pub d_z: usize,
    pub classes: usize,
}

impl<F: Scalar> Stage2State<F> {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn code_dim(&self) -> usize {
        self.class_prototypes.cols()
    }

    pub fn cond_dim(&self) -> usize {
        match self.cond_mode {
            CondMode::PseudoLabel => self.classes,
            CondMode::Consistent => self.code_dim(),
            CondMode::Both => self.classes + self.code_dim(),
        }
    }

    /// Posterior mean of one view's latent; the view-specific readout.
    pub fn specific_representation(&self, view: usize, x: &Tensor<F>) -> DisResult<Tensor<F>> {
        let vc = self
            .views
            .get(view)
            .ok_or_else(|| DisentangleError::Invalid(format!("no view {view}")))?;
        Ok(GaussianLatent::from_net(&vc.encoder, x)?.mean)
    }

    fn class_conditioning(&self, class_id: usize) -> Vec<F> {
        let c = self.classes;
        let mut row = Vec::with_capacity(self.cond_dim());
        if matches!(self.cond_mode, CondMode::PseudoLabel | CondMode::Both) {
            for k in 0..c {
                row.push(if k == class_id { F::one() } else { F::zero() });
            }
        }
        if matches!(self.cond_mode, CondMode::Consistent | CondMode::Both) {
            row.extend_from_slice(self.class_prototypes.row(class_id));
        }
        row
    }
}

/// Loss bookkeeping for one optimization step, all in f64. The reported
/// objective satisfies `spc = cvae + lambda * dis` per view to within
/// 1e-10; `dis` carries the configured constant view noise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage2Record {
    pub epoch: usize,
    pub step: usize,
    pub view_recon: Vec<f64>,
    pub view_cvae: Vec<f64>,
    pub view_dis: Vec<f64>,
    pub view_spc: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub epoch: usize,
    pub step: usize,
}

pub struct Stage2Output<F: Scalar> {
    pub state: Stage2State<F>,
    pub records: Vec<Stage2Record>,
    /// Set when training aborted on a non-finite loss and `state` is the
    /// last epoch that completed cleanly.
    pub diverged: Option<DivergenceInfo>,
}

/// Minibatch driver; owns the optimizers and the noise stream so a run
/// can stop and resume between epochs.
pub struct Stage2Trainer<F: Scalar> {
    pub state: Stage2State<F>,
    pub records: Vec<Stage2Record>,
    pub(crate) cfg: Stage2Config,
    pub(crate) model_opt: Adam<F>,
    pub(crate) q_opts: Vec<Adam<F>>,
    pub(crate) r_opts: Vec<Adam<F>>,
    pub(crate) rng: ChaCha20Rng,
    pub(crate) epoch: usize,
}

impl<F: Scalar> Stage2Trainer<F> {
    pub fn new(
        cfg: &Stage2Config,
        view_dims: &[usize],
        d_e: usize,
        classes: usize,
    ) -> DisResult<Self> {
        cfg.validate()?;
        if view_dims.is_empty() || view_dims.iter().any(|&d| d == 0) {
            return Err(DisentangleError::Invalid(format!(
                "bad view dims {view_dims:?}"
            )));
        }
        if d_e == 0 || classes == 0 {
            return Err(DisentangleError::Invalid(format!(
                "code dim {d_e} and class count {classes} must be positive"
            )));
        }
        let components = if cfg.mixture_components == 0 {
            classes
        } else {
            cfg.mixture_components
        };
        let cond_dim = match cfg.cond_mode {
            CondMode::PseudoLabel => classes,
            CondMode::Consistent => d_e,
            CondMode::Both => classes + d_e,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut views = Vec::with_capacity(view_dims.len());
        let mut conditionals = Vec::with_capacity(view_dims.len());
        let mut mixtures = Vec::with_capacity(view_dims.len());
        for &d_v in view_dims {
            let mut enc_dims = vec![d_v];
            enc_dims.extend_from_slice(&cfg.hidden);
            enc_dims.push(2 * cfg.d_z);
            let mut dec_dims = vec![cfg.d_z + cond_dim];
            dec_dims.extend(cfg.hidden.iter().rev());
            dec_dims.push(d_v);
            views.push(ViewCvae {
                encoder: Mlp::init(&enc_dims, Activation::Relu, &mut rng),
                decoder: Mlp::init(&dec_dims, Activation::Relu, &mut rng),
            });
            conditionals.push(VariationalConditional::init(
                d_e,
                &cfg.q_hidden,
                cfg.d_z,
                &mut rng,
            ));
            mixtures.push(MixtureOfGaussians::init(components, cfg.d_z, &mut rng)?);
        }
        let n_views = view_dims.len();
        Ok(Self {
            state: Stage2State {
                views,
                conditionals,
                mixtures,
                class_prototypes: Tensor::zeros(&[classes, d_e]),
                cond_mode: cfg.cond_mode,
                d_z: cfg.d_z,
                classes,
            },
            records: Vec::new(),
            cfg: cfg.clone(),
            model_opt: Adam::new(AdamParams::with_lr(cfg.lr)),
            q_opts: (0..n_views)
                .map(|_| Adam::new(AdamParams::with_lr(cfg.fit_lr)))
                .collect(),
            r_opts: (0..n_views)
                .map(|_| Adam::new(AdamParams::with_lr(cfg.fit_lr)))
                .collect(),
            rng,
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn check_inputs(
        &self,
        views: &[Tensor<F>],
        cond: &Tensor<F>,
        s_all: &Tensor<F>,
    ) -> DisResult<usize> {
        let bad = |m: String| Err(DisentangleError::Invalid(m));
        if views.len() != self.state.views.len() {
            return bad(format!(
                "{} views given, model has {}",
                views.len(),
                self.state.views.len()
            ));
        }
        let n = cond.rows();
        if n < 2 || s_all.rows() != n || views.iter().any(|v| v.rows() != n) {
            return bad("row counts disagree across views, codes and conditioning".into());
        }
        if cond.cols() != self.state.cond_dim() {
            return bad(format!(
                "conditioning width {} does not match mode width {}",
                cond.cols(),
                self.state.cond_dim()
            ));
        }
        if s_all.cols() != self.state.code_dim() {
            return bad(format!(
                "code width {} does not match {}",
                s_all.cols(),
                self.state.code_dim()
            ));
        }
        for (v, x) in views.iter().enumerate() {
            if x.cols() != self.state.views[v].encoder.in_dim() {
                return bad(format!(
                    "view {} width {} does not match encoder input {}",
                    v,
                    x.cols(),
                    self.state.views[v].encoder.in_dim()
                ));
            }
        }
        Ok(n)
    }

    /// One pass over the data in shuffled minibatches.
    pub fn run_epoch(
        &mut self,
        views: &[Tensor<F>],
        cond: &Tensor<F>,
        s_all: &Tensor<F>,
    ) -> DisResult<()> {
        let n = self.check_inputs(views, cond, s_all)?;
        let schedule = minibatches(n, self.cfg.batch_size, &mut self.rng);
        for (step, idx) in schedule.iter().enumerate() {
            if let Err(e) = self.train_batch(views, cond, s_all, idx, step) {
                return Err(upgrade_divergence(e, self.epoch, step));
            }
        }
        self.epoch += 1;
        Ok(())
    }

    fn train_batch(
        &mut self,
        views: &[Tensor<F>],
        cond: &Tensor<F>,
        s_all: &Tensor<F>,
        idx: &[usize],
        step: usize,
    ) -> DisResult<()> {
        let b = idx.len();
        let d_z = self.state.d_z;
        let s_b = s_all.take_rows(idx);
        let cond_b = cond.take_rows(idx);
        let x_b: Vec<Tensor<F>> = views.iter().map(|v| v.take_rows(idx)).collect();

        // Variational refresh on detached latents with frozen noise.
        for v in 0..x_b.len() {
            let lat = GaussianLatent::from_net(&self.state.views[v].encoder, &x_b[v])?;
            let eps = standard_normal::<F, _>(b, d_z, &mut self.rng);
            let mut h = Tensor::zeros(&[b, d_z]);
            for i in 0..b {
                for j in 0..d_z {
                    let sd = lat.log_std.at2(i, j).exp();
                    h.set2(i, j, lat.mean.at2(i, j) + sd * eps.at2(i, j));
                }
            }
            for _ in 0..self.cfg.fit_steps {
                q_fit_step(
                    &mut self.state.conditionals[v],
                    &mut self.q_opts[v],
                    &s_b,
                    &h,
                )?;
                r_fit_step(&mut self.state.mixtures[v], &mut self.r_opts[v], &h)?;
            }
        }

        // Model step: encoders and decoders learn, densities stay put.
        let lambda = self.cfg.lambda_dis;
        let mut tape = Tape::new();
        let s_in = tape.input(s_b);
        let cond_in = tape.input(cond_b);
        let mut pvars: Vec<Var> = Vec::new();
        let mut total: Option<Var> = None;
        let mut rec = Stage2Record {
            epoch: self.epoch,
            step,
            view_recon: Vec::new(),
            view_cvae: Vec::new(),
            view_dis: Vec::new(),
            view_spc: Vec::new(),
        };
        for (v, x) in x_b.iter().enumerate() {
            let vc = &self.state.views[v];
            let enc_vars = vc.encoder.register(&mut tape);
            let dec_vars = vc.decoder.register(&mut tape);
            pvars.extend(enc_vars.all());
            pvars.extend(dec_vars.all());
            let x_in = tape.input(x.clone());
            let lat = encode_specific(&mut tape, &vc.encoder, &enc_vars, x_in)?;
            let eps = tape.input(standard_normal::<F, _>(b, d_z, &mut self.rng));
            let h = reparameterize(&mut tape, lat, eps)?;
            let dec_in = tape.concat_cols(&[h, cond_in])?;
            let xhat = vc.decoder.forward(&mut tape, &dec_vars, dec_in)?;
            let recon = reconstruction_loss(&mut tape, x_in, xhat)?;
            let kl = kl_std_normal(&mut tape, lat)?;
            let l_cvae = tape.add(recon, kl)?;
            let q = &self.state.conditionals[v];
            let r = &self.state.mixtures[v];
            let q_vars = q.register_frozen(&mut tape);
            let r_vars = r.register_frozen(&mut tape);
            let mi = mi_upper_bound(&mut tape, s_in, h, q, &q_vars, r, &r_vars)?;
            let penalty = tape.scale(mi, F::from_f64(lambda))?;
            let objective = tape.add(l_cvae, penalty)?;

            let cvae_val = tape.scalar_value(l_cvae).as_f64();
            let dis_val = tape.scalar_value(mi).as_f64() + self.cfg.epsilon_view;
            rec.view_recon.push(tape.scalar_value(recon).as_f64());
            rec.view_cvae.push(cvae_val);
            rec.view_dis.push(dis_val);
            // Logged from the objective node itself (plus the bookkeeping
            // constant), so the decomposition cvae + lambda*dis is a real
            // cross-check and not an arithmetic tautology.
            rec.view_spc
                .push(tape.scalar_value(objective).as_f64() + lambda * self.cfg.epsilon_view);

            total = Some(match total {
                None => objective,
                Some(t) => tape.add(t, objective)?,
            });
        }
        let total = total.expect("at least one view");
        tape.backward(total)?;
        let grads = grads_for(&tape, &pvars);
        let mut params: Vec<&mut Tensor<F>> = Vec::new();
        for vc in self.state.views.iter_mut() {
            params.extend(vc.encoder.params_mut());
            params.extend(vc.decoder.params_mut());
        }
        self.model_opt.step(&mut params, &grads)?;
        self.records.push(rec);
        Ok(())
    }
}

fn upgrade_divergence(e: DisentangleError, epoch: usize, step: usize) -> DisentangleError {
    match e {
        DisentangleError::Autodiff(src @ NdError::NonFinite { .. }) => {
            DisentangleError::Divergence {
                epoch,
                step,
                source: src,
            }
        }
        other => other,
    }
}

fn one_hot<F: Scalar>(labels: &[usize], classes: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.set2(i, l, F::one());
    }
    t
}

fn class_prototypes<F: Scalar>(
    s_all: &Tensor<F>,
    labels: &[usize],
    classes: usize,
) -> Tensor<F> {
    let d = s_all.cols();
    let mut proto = Tensor::zeros(&[classes, d]);
    let mut counts = vec![0usize; classes];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for j in 0..d {
            let cur = proto.at2(l, j);
            proto.set2(l, j, cur + s_all.at2(i, j));
        }
    }
    for (l, &c) in counts.iter().enumerate() {
        if c > 0 {
            let inv = F::from_f64(1.0 / c as f64);
            for j in 0..d {
                let cur = proto.at2(l, j);
                proto.set2(l, j, cur * inv);
            }
        }
    }
    proto
}

fn build_conditioning<F: Scalar>(
    pseudo: &ClusterAssignment<F>,
    s_all: &Tensor<F>,
    mode: CondMode,
) -> DisResult<Tensor<F>> {
    let classes = pseudo.probs.cols();
    Ok(match mode {
        CondMode::PseudoLabel => one_hot(&pseudo.hard, classes),
        CondMode::Consistent => s_all.clone(),
        CondMode::Both => Tensor::hstack(&[&one_hot(&pseudo.hard, classes), s_all])?,
    })
}

/// Trains the specificity stage against frozen stage-1 outputs. On a
/// non-finite loss after at least one clean epoch, training stops, the
/// last clean epoch's state is returned and `diverged` is set; a
/// first-epoch failure is an error.
pub fn stage2_train<F: Scalar>(
    data: &MultiViewBatch<F>,
    pseudo: &ClusterAssignment<F>,
    s_all: &Tensor<F>,
    cfg: &Stage2Config,
) -> DisResult<Stage2Output<F>> {
    data.validate()?;
    let n = data.len();
    let classes = pseudo.probs.cols();
    if pseudo.hard.len() != n || s_all.rows() != n {
        return Err(DisentangleError::Invalid(format!(
            "pseudo-labels ({}) and codes ({}) must cover all {} instances",
            pseudo.hard.len(),
            s_all.rows(),
            n
        )));
    }
    if classes == 0 || pseudo.hard.iter().any(|&l| l >= classes) {
        return Err(DisentangleError::Invalid(
            "pseudo-label out of class range".into(),
        ));
    }
    let view_dims: Vec<usize> = data.views.iter().map(|v| v.cols()).collect();
    let mut trainer = Stage2Trainer::new(cfg, &view_dims, s_all.cols(), classes)?;
    trainer.state.class_prototypes = class_prototypes(s_all, &pseudo.hard, classes);
    let cond = build_conditioning(pseudo, s_all, cfg.cond_mode)?;

    let mut last_good: Option<(Stage2State<F>, usize)> = None;
    for _ in 0..cfg.epochs {
        match trainer.run_epoch(&data.views, &cond, s_all) {
            Ok(()) => last_good = Some((trainer.state.clone(), trainer.records.len())),
            Err(DisentangleError::Divergence {
                epoch,
                step,
                source,
            }) => {
                if let Some((state, keep)) = last_good {
                    eprintln!(
                        "stage 2 diverged at epoch {epoch} step {step} ({source}); \
                         keeping the state after epoch {}",
                        epoch.saturating_sub(1)
                    );
                    let mut records = trainer.records;
                    records.truncate(keep);
                    return Ok(Stage2Output {
                        state,
                        records,
                        diverged: Some(DivergenceInfo { epoch, step }),
                    });
                }
                return Err(DisentangleError::Divergence {
                    epoch,
                    step,
                    source,
                });
            }
            Err(other) => return Err(other),
        }
    }
    Ok(Stage2Output {
        state: trainer.state,
        records: trainer.records,
        diverged: None,
    })
}

/// Latent rows to decode: either given directly or drawn from the
/// fitted marginal.
pub enum Style<F> {
    Given(Tensor<F>),
    Random { n: usize },
}

/// Decodes latent styles under an explicit class condition.
pub fn conditional_sample<F: Scalar, R: Rng>(
    state: &Stage2State<F>,
    view: usize,
    class_id: usize,
    style: Style<F>,
    rng: &mut R,
) -> DisResult<Tensor<F>> {
    if view >= state.n_views() {
        return Err(DisentangleError::Invalid(format!("no view {view}")));
    }
    if class_id >= state.classes {
        return Err(DisentangleError::Invalid(format!(
            "class {} out of range (have {})",
            class_id, state.classes
        )));
    }
    let z = match style {
        Style::Given(t) => {
            if t.rank() != 2 || t.cols() != state.d_z || t.rows() == 0 {
                return Err(DisentangleError::Invalid(format!(
                    "style rows must be [n, {}], got {:?}",
                    state.d_z,
                    t.shape()
                )));
            }
            t
        }
        Style::Random { n } => {
            if n == 0 {
                return Err(DisentangleError::Invalid("zero samples requested".into()));
            }
            state.mixtures[view].sample(n, rng)?
        }
    };
    let cond_row = state.class_conditioning(class_id);
    let mut cond = Tensor::zeros(&[z.rows(), cond_row.len()]);
    for i in 0..z.rows() {
        cond.row_mut(i).copy_from_slice(&cond_row);
    }
    let input = Tensor::hstack(&[&z, &cond])?;
    state.views[view]
        .decoder
        .forward_value(&input)
        .map_err(Into::into)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_synthetic, SyntheticSpec};

    type T = Tensor<f64>;

    fn perfect_pseudo(labels: &[usize], classes: usize) -> ClusterAssignment<f64> {
        ClusterAssignment {
            probs: one_hot(labels, classes),
            hard: labels.to_vec(),
        }
    }

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            views: 2,
            d_s: 3,
            d_p: 2,
            d_v: 10,
            n: 256,
            noise_std: 0.05,
            seed: 5,
            ..SyntheticSpec::default()
        }
    }

    fn small_cfg() -> Stage2Config {
        Stage2Config {
            d_z: 4,
            hidden: vec![32],
            q_hidden: vec![16],
            epochs: 10,
            batch_size: 64,
            fit_steps: 2,
            seed: 1,
            ..Stage2Config::default()
        }
    }

    fn training_inputs(
        spec: &SyntheticSpec,
    ) -> (MultiViewBatch<f64>, ClusterAssignment<f64>, T) {
        let batch = gen_synthetic::<f64>(spec).unwrap();
        let labels = batch.labels.clone().unwrap();
        let pseudo = perfect_pseudo(&labels, spec.classes);
        let s_all = batch.gt_consistent.clone().unwrap();
        (batch, pseudo, s_all)
    }

    fn epoch_means(records: &[Stage2Record], f: impl Fn(&Stage2Record) -> f64) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for r in records {
            if r.epoch >= sums.len() {
                sums.resize(r.epoch + 1, (0.0, 0));
            }
            sums[r.epoch].0 += f(r);
            sums[r.epoch].1 += 1;
        }
        sums.iter().map(|(s, c)| s / *c as f64).collect()
    }

    #[test]
    fn reconstruction_improves_without_information_penalty() {
        let (batch, pseudo, s_all) = training_inputs(&small_spec());
        let cfg = Stage2Config {
            lambda_dis: 0.0,
            ..small_cfg()
        };
        let out = stage2_train(&batch, &pseudo, &s_all, &cfg).unwrap();
        assert!(out.diverged.is_none());
        let recon = epoch_means(&out.records, |r| r.view_recon.iter().sum::<f64>());
        assert_eq!(recon.len(), 10);
        for e in 1..recon.len() {
            assert!(
                recon[e] <= recon[e - 1] * 1.05,
                "epoch {} recon {} vs previous {}",
                e,
                recon[e],
                recon[e - 1]
            );
        }
        assert!(
            recon[9] < 0.8 * recon[0],
            "first {} last {}",
            recon[0],
            recon[9]
        );
    }

    #[test]
    fn seeded_rerun_reproduces_losses_exactly() {
        let (batch, pseudo, s_all) = training_inputs(&small_spec());
        let cfg = Stage2Config {
            epochs: 1,
            ..small_cfg()
        };
        let a = stage2_train(&batch, &pseudo, &s_all, &cfg).unwrap();
        let b = stage2_train(&batch, &pseudo, &s_all, &cfg).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.view_spc, rb.view_spc);
            assert_eq!(ra.view_cvae, rb.view_cvae);
            assert_eq!(ra.view_dis, rb.view_dis);
        }
    }

    #[test]
    fn reported_objective_decomposition_is_exact() {
        let (batch, pseudo, s_all) = training_inputs(&small_spec());
        for eps in [0.0, 0.25] {
            let cfg = Stage2Config {
                epochs: 2,
                epsilon_view: eps,
                ..small_cfg()
            };
            let out = stage2_train(&batch, &pseudo, &s_all, &cfg).unwrap();
            assert!(!out.records.is_empty());
            for r in &out.records {
                for v in 0..r.view_spc.len() {
                    let want = r.view_cvae[v] + cfg.lambda_dis * r.view_dis[v];
                    assert!(
                        (r.view_spc[v] - want).abs() <= 1e-10,
                        "epoch {} step {} view {}: {} vs {}",
                        r.epoch,
                        r.step,
                        v,
                        r.view_spc[v],
                        want
                    );
                }
            }
        }
    }

    #[test]
    fn first_epoch_divergence_is_an_error() {
        let (batch, pseudo, s_all) = training_inputs(&small_spec());
        let cfg = Stage2Config {
            lr: 1e80,
            epochs: 2,
            batch_size: 64,
            ..small_cfg()
        };
        match stage2_train(&batch, &pseudo, &s_all, &cfg) {
            Err(DisentangleError::Divergence { epoch, .. }) => assert_eq!(epoch, 0),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn later_divergence_surfaces_last_clean_epoch() {
        let (batch, pseudo, s_all) = training_inputs(&small_spec());
        let cfg = small_cfg();
        let cond = build_conditioning(&pseudo, &s_all, cfg.cond_mode).unwrap();
        let dims: Vec<usize> = batch.views.iter().map(|v| v.cols()).collect();
        let mut trainer = Stage2Trainer::new(&cfg, &dims, s_all.cols(), 3).unwrap();
        trainer.state.class_prototypes =
            class_prototypes(&s_all, &pseudo.hard, 3);
        trainer.run_epoch(&batch.views, &cond, &s_all).unwrap();
        let clean_records = trainer.records.len();
        assert!(clean_records > 0);

        // Overflowing inputs blow up the squared reconstruction error.
        let poisoned: Vec<T> = batch.views.iter().map(|v| v.map(|x| x + 1e200)).collect();
        match trainer.run_epoch(&poisoned, &cond, &s_all) {
            Err(DisentangleError::Divergence { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
        // The state before the bad epoch still encodes and decodes.
        let p = trainer.state.specific_representation(0, &batch.views[0]).unwrap();
        assert_eq!(p.shape(), &[batch.len(), cfg.d_z]);
        assert!(p.is_finite());
    }

    #[test]
    fn class_conditioned_generation_recovers_class_centroids() {
        let spec = SyntheticSpec {
            classes: 5,
            views: 2,
            d_s: 3,
            d_p: 2,
            d_v: 12,
            n: 500,
            noise_std: 0.05,
            seed: 9,
            ..SyntheticSpec::default()
        };
        let (batch, pseudo, s_all) = training_inputs(&spec);
        let cfg = Stage2Config {
            d_z: 4,
            hidden: vec![32],
            q_hidden: vec![16],
            epochs: 60,
            batch_size: 125,
            lr: 5e-3,
            fit_steps: 3,
            seed: 2,
            ..Stage2Config::default()
        };
        let out = stage2_train(&batch, &pseudo, &s_all, &cfg).unwrap();
        assert!(out.diverged.is_none());

        // Per-class centroids of the observed first view.
        let x = &batch.views[0];
        let labels = batch.labels.as_ref().unwrap();
        let mut centroids = vec![vec![0.0; x.cols()]; spec.classes];
        let mut counts = vec![0usize; spec.classes];
        for i in 0..x.rows() {
            counts[labels[i]] += 1;
            for j in 0..x.cols() {
                centroids[labels[i]][j] += x.at2(i, j);
            }
        }
        for (c, row) in centroids.iter_mut().enumerate() {
            for v in row.iter_mut() {
                *v /= counts[c] as f64;
            }
        }

        let style = T::zeros(&[1, cfg.d_z]);
        let mut hits = 0;
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for class in 0..spec.classes {
            let gen = conditional_sample(
                &out.state,
                0,
                class,
                Style::Given(style.clone()),
                &mut rng,
            )
            .unwrap();
            let mut best = (f64::INFINITY, usize::MAX);
            for (c, centroid) in centroids.iter().enumerate() {
                let d2: f64 = centroid
                    .iter()
                    .enumerate()
                    .map(|(j, &m)| (gen.at2(0, j) - m).powi(2))
                    .sum();
                if d2 < best.0 {
                    best = (d2, c);
                }
            }
            if best.1 == class {
                hits += 1;
            }
        }
        assert!(
            hits as f64 >= 0.8 * spec.classes as f64,
            "{} of {} classes matched",
            hits,
            spec.classes
        );
    }

    #[test]
    fn style_rows_decode_to_distinct_outputs() {
        let cfg = small_cfg();
        let trainer = Stage2Trainer::<f64>::new(&cfg, &[10, 10], 3, 3).unwrap();
        let state = trainer.state;
        let styles = state.mixtures[0].means.clone();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let gen =
            conditional_sample(&state, 0, 1, Style::Given(styles), &mut rng).unwrap();
        for a in 0..gen.rows() {
            for b in a + 1..gen.rows() {
                let d2: f64 = (0..gen.cols())
                    .map(|j| (gen.at2(a, j) - gen.at2(b, j)).powi(2))
                    .sum();
                assert!(d2 > 0.0, "rows {} and {} coincide", a, b);
            }
        }
    }

    #[test]
    fn random_style_is_seed_deterministic() {
        let cfg = small_cfg();
        let trainer = Stage2Trainer::<f64>::new(&cfg, &[10, 10], 3, 3).unwrap();
        let state = trainer.state;
        let draw = || {
            let mut rng = ChaCha20Rng::seed_from_u64(8);
            conditional_sample(&state, 1, 2, Style::Random { n: 6 }, &mut rng).unwrap()
        };
        assert_eq!(draw().data(), draw().data());
    }

    #[test]
    fn out_of_range_requests_rejected() {
        let cfg = small_cfg();
        let trainer = Stage2Trainer::<f64>::new(&cfg, &[10, 10], 3, 3).unwrap();
        let state = trainer.state;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        assert!(conditional_sample(&state, 0, 3, Style::Random { n: 1 }, &mut rng).is_err());
        assert!(conditional_sample(&state, 2, 0, Style::Random { n: 1 }, &mut rng).is_err());
        assert!(conditional_sample(&state, 0, 0, Style::Random { n: 0 }, &mut rng).is_err());
        let bad_style = T::zeros(&[2, cfg.d_z + 1]);
        assert!(conditional_sample(&state, 0, 0, Style::Given(bad_style), &mut rng).is_err());
    }

    #[test]
    fn conditioning_modes_shape_the_decoder_input() {
        let (batch, pseudo, s_all) = training_inputs(&small_spec());
        for (mode, extra) in [
            (CondMode::PseudoLabel, 3),
            (CondMode::Consistent, 3),
            (CondMode::Both, 6),
        ] {
            let cfg = Stage2Config {
                epochs: 1,
                cond_mode: mode,
                ..small_cfg()
            };
            let out = stage2_train(&batch, &pseudo, &s_all, &cfg).unwrap();
            assert_eq!(
                out.state.views[0].decoder.in_dim(),
                cfg.d_z + extra,
                "mode {:?}",
                mode
            );
            let mut rng = ChaCha20Rng::seed_from_u64(6);
            let gen =
                conditional_sample(&out.state, 0, 1, Style::Random { n: 2 }, &mut rng).unwrap();
            assert_eq!(gen.shape(), &[2, 10]);
            assert!(gen.is_finite());
        }
    }

    #[test]
    fn mismatched_stage1_artifacts_rejected() {
        let (batch, pseudo, s_all) = training_inputs(&small_spec());
        let cfg = small_cfg();
        let short = s_all.take_rows(&(0..100).collect::<Vec<_>>());
        assert!(stage2_train(&batch, &pseudo, &short, &cfg).is_err());
        let mut bad_pseudo = pseudo;
        bad_pseudo.hard[0] = 7;
        assert!(stage2_train(&batch, &bad_pseudo, &s_all, &cfg).is_err());
    }
}
