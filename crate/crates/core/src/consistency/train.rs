//! Two-phase stage-1 trainer: contrastive pretraining, then clustering
//! consistency.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::losses::{clustering_loss, contrastive_loss};
use super::neighbors::mine_neighbors;
use super::{ConsResult, ConsistencyError, ConsistentEncoderState, Stage1Config};
use crate::datasets::{augment, MultiViewBatch};
use crate::ndgrad::{Adam, AdamParams, NdError, Tape, Tensor, Var};
use crate::nn::grads_for;
use crate::scalar::Scalar;

/// One loss-curve row; `None` = not measured in that phase.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: &'static str,
    pub epoch: usize,
    pub l_ins: Option<f64>,
    pub l_clu: Option<f64>,
    /// Entropy of the batch-mean assignment, nats.
    pub entropy: Option<f64>,
}

pub struct Stage1Output<F: Scalar> {
    pub state: ConsistentEncoderState<F>,
    pub curves: Vec<LossRecord>,
}

fn diverged(phase: &'static str, epoch: usize) -> impl FnOnce(NdError) -> ConsistencyError {
    move |source| ConsistencyError::Divergence {
        phase,
        epoch,
        source,
    }
}

/// Seeded minibatch index schedule; a trailing chunk of fewer than 2 rows
/// is dropped (a single row has no in-batch structure to learn from).
pub(crate) fn minibatches<R: Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

pub fn stage1_train<F: Scalar>(
    data: &MultiViewBatch<F>,
    cfg: &Stage1Config,
) -> ConsResult<Stage1Output<F>> {
    cfg.validate()?;
    data.validate()?;
    let d_v = data.views[0].cols();
    for (i, x) in data.views.iter().enumerate() {
        if x.cols() != d_v {
            return Err(ConsistencyError::Invalid(format!(
                "the shared encoder needs equal view dims; view {i} has {}, view 0 has {d_v}",
                x.cols()
            )));
        }
    }
    let n = data.len();
    if n < 2 {
        return Err(ConsistencyError::Invalid(format!(
            "need at least 2 instances, got {n}"
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut state = ConsistentEncoderState::init(cfg, d_v, &mut rng)?;
    let mut curves = Vec::new();

    // Phase A: transformation invariance via the pooled contrastive loss
    // over 2V augmented blocks, training encoder + contrastive head.
    let mut opt = Adam::new(AdamParams::with_lr(cfg.lr));
    for epoch in 0..cfg.epochs_pretrain {
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in minibatches(n, cfg.batch_size, &mut rng) {
            let sub = data.take_rows(&chunk);
            let pairs = augment(&sub, &cfg.augment, &mut rng)?;

            let mut tape = Tape::<F>::new();
            let enc_vars = state.encoder.register(&mut tape);
            let head_vars = state.contrastive_head.register(&mut tape);
            let mut blocks = Vec::with_capacity(2 * pairs.len());
            for pair in &pairs {
                for copy in pair {
                    let x = tape.input(copy.clone());
                    let h = state
                        .encoder
                        .forward(&mut tape, &enc_vars, x)
                        .map_err(diverged("pretrain", epoch))?;
                    let z = state
                        .contrastive_head
                        .forward(&mut tape, &head_vars, h)
                        .map_err(diverged("pretrain", epoch))?;
                    let zn = tape
                        .l2_normalize_rows(z)
                        .map_err(diverged("pretrain", epoch))?;
                    blocks.push(zn);
                }
            }
            let loss = contrastive_loss(&mut tape, &blocks, cfg.tau)?;
            tape.backward(loss).map_err(diverged("pretrain", epoch))?;

            let mut vars = enc_vars.all();
            vars.extend(head_vars.all());
            let grads = grads_for(&tape, &vars);
            let mut params: Vec<&mut Tensor<F>> = state.encoder.params_mut();
            params.extend(state.contrastive_head.params_mut());
            opt.step(&mut params, &grads)
                .map_err(diverged("pretrain", epoch))?;

            epoch_loss += tape.scalar_value(loss).as_f64();
            steps += 1;
        }
        curves.push(LossRecord {
            phase: "pretrain",
            epoch,
            l_ins: Some(epoch_loss / steps.max(1) as f64),
            l_clu: None,
            entropy: None,
        });
    }

    // Optional neighbor index mined from the phase-A embedding space.
    let neighbors = if cfg.use_knn && cfg.epochs_cluster > 0 {
        let emb = super::assign_pseudolabels(&state, data)?.s_fused;
        Some(mine_neighbors(&emb, cfg.knn_k)?)
    } else {
        None
    };

    // Phase B: clustering consistency over view pairs (plus optional
    // neighbor pairs / joint contrastive term), training encoder +
    // clustering head (+ contrastive head when joint).
    let mut opt = Adam::new(AdamParams::with_lr(cfg.lr));
    let n_views = data.n_views();
    for epoch in 0..cfg.epochs_cluster {
        let mut ep_clu = 0.0;
        let mut ep_ins = 0.0;
        let mut ep_ent = 0.0;
        let mut steps = 0usize;
        for chunk in minibatches(n, cfg.batch_size, &mut rng) {
            let sub = data.take_rows(&chunk);
            let mut tape = Tape::<F>::new();
            let enc_vars = state.encoder.register(&mut tape);
            let clu_vars = state.clustering_head.register(&mut tape);

            let mut probs: Vec<Var> = Vec::with_capacity(n_views);
            for x in &sub.views {
                let xv = tape.input(x.clone());
                let h = state
                    .encoder
                    .forward(&mut tape, &enc_vars, xv)
                    .map_err(diverged("cluster", epoch))?;
                let logits = state
                    .clustering_head
                    .forward(&mut tape, &clu_vars, h)
                    .map_err(diverged("cluster", epoch))?;
                probs.push(tape.softmax(logits).map_err(diverged("cluster", epoch))?);
            }

            let mut pair_losses = Vec::new();
            for i in 0..n_views {
                for j in (i + 1)..n_views {
                    pair_losses.push(clustering_loss(
                        &mut tape,
                        probs[i],
                        probs[j],
                        cfg.lambda_clu,
                    )?);
                }
            }
            if let Some(nn) = &neighbors {
                // One sampled neighbor per row, paired within each view.
                let nb_rows: Vec<usize> = chunk
                    .iter()
                    .map(|&r| nn[r][rng.gen_range(0..cfg.knn_k)])
                    .collect();
                for (v, x) in data.views.iter().enumerate() {
                    let xnb = tape.input(x.take_rows(&nb_rows));
                    let h = state
                        .encoder
                        .forward(&mut tape, &enc_vars, xnb)
                        .map_err(diverged("cluster", epoch))?;
                    let logits = state
                        .clustering_head
                        .forward(&mut tape, &clu_vars, h)
                        .map_err(diverged("cluster", epoch))?;
                    let pn = tape.softmax(logits).map_err(diverged("cluster", epoch))?;
                    pair_losses.push(clustering_loss(&mut tape, probs[v], pn, cfg.lambda_clu)?);
                }
            }
            let mut loss = pair_losses[0];
            for &l in &pair_losses[1..] {
                loss = tape.add(loss, l).map_err(diverged("cluster", epoch))?;
            }
            if pair_losses.len() > 1 {
                loss = tape
                    .scale(loss, F::from_f64(1.0 / pair_losses.len() as f64))
                    .map_err(diverged("cluster", epoch))?;
            }

            let mut head_vars = None;
            if cfg.phase_b_joint {
                let pairs = augment(&sub, &cfg.augment, &mut rng)?;
                let f_vars = state.contrastive_head.register(&mut tape);
                let mut blocks = Vec::with_capacity(2 * pairs.len());
                for pair in &pairs {
                    for copy in pair {
                        let x = tape.input(copy.clone());
                        let h = state
                            .encoder
                            .forward(&mut tape, &enc_vars, x)
                            .map_err(diverged("cluster", epoch))?;
                        let z = state
                            .contrastive_head
                            .forward(&mut tape, &f_vars, h)
                            .map_err(diverged("cluster", epoch))?;
                        blocks.push(
                            tape.l2_normalize_rows(z)
                                .map_err(diverged("cluster", epoch))?,
                        );
                    }
                }
                let ins = contrastive_loss(&mut tape, &blocks, cfg.tau)?;
                ep_ins += tape.scalar_value(ins).as_f64();
                loss = tape.add(loss, ins).map_err(diverged("cluster", epoch))?;
                head_vars = Some(f_vars);
            }

            tape.backward(loss).map_err(diverged("cluster", epoch))?;

            let mut vars = enc_vars.all();
            vars.extend(clu_vars.all());
            if let Some(fv) = &head_vars {
                vars.extend(fv.all());
            }
            let grads = grads_for(&tape, &vars);
            let mut params: Vec<&mut Tensor<F>> = state.encoder.params_mut();
            params.extend(state.clustering_head.params_mut());
            if head_vars.is_some() {
                params.extend(state.contrastive_head.params_mut());
            }
            opt.step(&mut params, &grads)
                .map_err(diverged("cluster", epoch))?;

            // Entropy of the batch-mean assignment, pooled over views.
            let c = state.clusters;
            let mut gbar = vec![0.0f64; c];
            let mut rows = 0usize;
            for &p in &probs {
                let t = tape.value(p);
                for r in 0..t.rows() {
                    for (acc, v) in gbar.iter_mut().zip(t.row(r)) {
                        *acc += v.as_f64();
                    }
                }
                rows += t.rows();
            }
            let ent: f64 = gbar
                .iter()
                .map(|&g| {
                    let q = g / rows as f64;
                    if q > 0.0 {
                        -q * q.ln()
                    } else {
                        0.0
                    }
                })
                .sum();

            ep_clu += tape.scalar_value(loss).as_f64();
            ep_ent += ent;
            steps += 1;
        }
        let inv = 1.0 / steps.max(1) as f64;
        curves.push(LossRecord {
            phase: "cluster",
            epoch,
            l_ins: cfg.phase_b_joint.then_some(ep_ins * inv),
            l_clu: Some(ep_clu * inv),
            entropy: Some(ep_ent * inv),
        });
    }

    Ok(Stage1Output { state, curves })
}
