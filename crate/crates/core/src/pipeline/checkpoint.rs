//! Binary checkpoints: a magic-tagged container of named f64 tensors
//! plus the RNG coordinates, enough to restart stage-2 training mid-run
//! or to reload a trained model for generation.
//!
//! Layout (all integers little-endian):
//!   magic "MVCK" | u32 version | u64 config hash
//!   | u16 module-name len | name bytes
//!   | 32-byte rng seed | u64 rng stream | u128 rng word position
//!   | u32 tensor count | tensors
//! and each tensor is
//!   u16 name len | name bytes | u8 rank | u32 dims... | u64 count
//!   | count x f64 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{PipeResult, PipelineError};
use crate::consistency::ConsistentEncoderState;
use crate::disentangle::{
    CondMode, MixtureOfGaussians, Stage2Config, Stage2State, Stage2Trainer,
    VariationalConditional, ViewCvae,
};
use crate::ndgrad::{Adam, Tensor};
use crate::nn::{Activation, Linear, Mlp};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Coordinates of a counter-mode RNG; restoring them resumes the stream
/// exactly where it stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    /// Placeholder for checkpoints that are inference artifacts only.
    pub fn zero() -> Self {
        Self {
            seed: [0; 32],
            stream: 0,
            word_pos: 0,
        }
    }

    pub fn snapshot(rng: &ChaCha20Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub module: String,
    pub config_hash: u64,
    pub rng: RngState,
    pub tensors: Vec<NamedTensor>,
}

fn corrupt(path: &Path, msg: impl Into<String>) -> PipelineError {
    PipelineError::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn new(module: &str, config_hash: u64, rng: RngState) -> Self {
        Self {
            module: module.into(),
            config_hash,
            rng,
            tensors: Vec::new(),
        }
    }

    pub fn push<F: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<F>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64()).collect(),
        });
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: vec![1],
            data: vec![v],
        });
    }

    pub fn get(&self, name: &str) -> PipeResult<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| PipelineError::Invalid(format!("checkpoint has no tensor '{name}'")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    pub fn scalar(&self, name: &str) -> PipeResult<f64> {
        let t = self.get(name)?;
        if t.data.len() != 1 {
            return Err(PipelineError::Invalid(format!(
                "checkpoint tensor '{name}' is not a scalar (shape {:?})",
                t.shape
            )));
        }
        Ok(t.data[0])
    }

    pub fn tensor<F: Scalar>(&self, name: &str) -> PipeResult<Tensor<F>> {
        let t = self.get(name)?;
        Tensor::from_f64_slice(&t.shape, &t.data)
            .map_err(|e| PipelineError::Invalid(format!("checkpoint tensor '{name}': {e}")))
    }

    /// Copies a stored tensor into an existing parameter, refusing any
    /// shape drift between the checkpoint and the current model.
    pub fn restore_into<F: Scalar>(&self, name: &str, dst: &mut Tensor<F>) -> PipeResult<()> {
        let t = self.get(name)?;
        if t.shape != dst.shape() {
            return Err(PipelineError::Invalid(format!(
                "checkpoint tensor '{name}' has shape {:?}, model expects {:?}",
                t.shape,
                dst.shape()
            )));
        }
        for (d, &s) in dst.data_mut().iter_mut().zip(&t.data) {
            *d = F::from_f64(s);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> PipeResult<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash.to_le_bytes())?;
        write_str(&mut w, path, &self.module)?;
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| corrupt(path, "too many tensors for the format"))?;
        w.write_all(&count.to_le_bytes())?;
        for t in &self.tensors {
            write_str(&mut w, path, &t.name)?;
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| corrupt(path, format!("tensor '{}' rank too large", t.name)))?;
            w.write_all(&[rank])?;
            for &d in &t.shape {
                let d = u32::try_from(d)
                    .map_err(|_| corrupt(path, format!("tensor '{}' dim too large", t.name)))?;
                w.write_all(&d.to_le_bytes())?;
            }
            let n: usize = t.shape.iter().product();
            if n != t.data.len() {
                return Err(corrupt(
                    path,
                    format!("tensor '{}' shape/value count disagree", t.name),
                ));
            }
            w.write_all(&(n as u64).to_le_bytes())?;
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> PipeResult<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, path, &mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(corrupt(path, format!("bad magic {magic:02x?}")));
        }
        let version = read_u32(&mut r, path)?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(
                path,
                format!("format version {version}, this build reads {CHECKPOINT_VERSION}"),
            ));
        }
        let config_hash = read_u64(&mut r, path)?;
        let module = read_str(&mut r, path)?;
        let mut seed = [0u8; 32];
        read_exact(&mut r, path, &mut seed)?;
        let stream = read_u64(&mut r, path)?;
        let mut wp = [0u8; 16];
        read_exact(&mut r, path, &mut wp)?;
        let word_pos = u128::from_le_bytes(wp);
        let count = read_u32(&mut r, path)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_str(&mut r, path)?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, path, &mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r, path)? as usize);
            }
            let n = read_u64(&mut r, path)? as usize;
            if n != shape.iter().product::<usize>() {
                return Err(corrupt(
                    path,
                    format!("tensor '{name}' count {n} does not match shape {shape:?}"),
                ));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                read_exact(&mut r, path, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Self {
            module,
            config_hash,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            tensors,
        })
    }
}

fn write_str<W: Write>(w: &mut W, path: &Path, s: &str) -> PipeResult<()> {
    let len =
        u16::try_from(s.len()).map_err(|_| corrupt(path, format!("string '{s}' too long")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, path: &Path, buf: &mut [u8]) -> PipeResult<()> {
    r.read_exact(buf)
        .map_err(|_| corrupt(path, "truncated file"))
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> PipeResult<u32> {
    let mut b = [0u8; 4];
    read_exact(r, path, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, path: &Path) -> PipeResult<u64> {
    let mut b = [0u8; 8];
    read_exact(r, path, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R, path: &Path) -> PipeResult<String> {
    let mut b = [0u8; 2];
    read_exact(r, path, &mut b)?;
    let len = u16::from_le_bytes(b) as usize;
    let mut s = vec![0u8; len];
    read_exact(r, path, &mut s)?;
    String::from_utf8(s).map_err(|_| corrupt(path, "non-utf8 name"))
}

fn push_mlp<F: Scalar>(ck: &mut Checkpoint, prefix: &str, mlp: &Mlp<F>) {
    for (name, t) in mlp.param_names(prefix).into_iter().zip(mlp.params()) {
        ck.push(name, t);
    }
}

fn restore_mlp<F: Scalar>(ck: &Checkpoint, prefix: &str, mlp: &mut Mlp<F>) -> PipeResult<()> {
    for (name, t) in mlp.param_names(prefix).into_iter().zip(mlp.params_mut()) {
        ck.restore_into(&name, t)?;
    }
    Ok(())
}

/// Reconstructs a network from stored layers `<prefix>.0.w, .0.b, ...`
/// without a shape hint; layer count comes from the names present.
fn mlp_from<F: Scalar>(ck: &Checkpoint, prefix: &str, act: Activation) -> PipeResult<Mlp<F>> {
    let mut layers = Vec::new();
    for l in 0.. {
        let wname = format!("{prefix}.{l}.w");
        if !ck.has(&wname) {
            break;
        }
        layers.push(Linear {
            w: ck.tensor(&wname)?,
            b: ck.tensor(&format!("{prefix}.{l}.b"))?,
        });
    }
    if layers.is_empty() {
        return Err(PipelineError::Invalid(format!(
            "checkpoint has no layers under '{prefix}'"
        )));
    }
    Ok(Mlp {
        layers,
        activation: act,
    })
}

fn push_adam<F: Scalar>(ck: &mut Checkpoint, prefix: &str, opt: &Adam<F>) {
    let (step, slots) = opt.export_state();
    ck.push_scalar(format!("{prefix}.step"), step as f64);
    ck.push_scalar(format!("{prefix}.slots"), slots.len() as f64);
    for (i, (m, v)) in slots.into_iter().enumerate() {
        ck.tensors.push(NamedTensor {
            name: format!("{prefix}.{i}.m"),
            shape: vec![m.len()],
            data: m,
        });
        ck.tensors.push(NamedTensor {
            name: format!("{prefix}.{i}.v"),
            shape: vec![v.len()],
            data: v,
        });
    }
}

fn restore_adam<F: Scalar>(ck: &Checkpoint, prefix: &str, opt: &mut Adam<F>) -> PipeResult<()> {
    let step = ck.scalar(&format!("{prefix}.step"))? as u64;
    let nslots = ck.scalar(&format!("{prefix}.slots"))? as usize;
    let mut slots = Vec::with_capacity(nslots);
    for i in 0..nslots {
        let m = ck.get(&format!("{prefix}.{i}.m"))?.data.clone();
        let v = ck.get(&format!("{prefix}.{i}.v"))?.data.clone();
        slots.push((m, v));
    }
    opt.import_state(step, slots);
    Ok(())
}

fn cond_mode_code(mode: CondMode) -> f64 {
    match mode {
        CondMode::PseudoLabel => 0.0,
        CondMode::Consistent => 1.0,
        CondMode::Both => 2.0,
    }
}

fn cond_mode_from(code: f64) -> PipeResult<CondMode> {
    match code as i64 {
        0 => Ok(CondMode::PseudoLabel),
        1 => Ok(CondMode::Consistent),
        2 => Ok(CondMode::Both),
        other => Err(PipelineError::Invalid(format!(
            "unknown conditioning code {other}"
        ))),
    }
}

pub fn save_stage1_state<F: Scalar>(
    path: &Path,
    state: &ConsistentEncoderState<F>,
    config_hash: u64,
) -> PipeResult<()> {
    let mut ck = Checkpoint::new("consistency", config_hash, RngState::zero());
    push_mlp(&mut ck, "encoder", &state.encoder);
    push_mlp(&mut ck, "contrastive", &state.contrastive_head);
    push_mlp(&mut ck, "clustering", &state.clustering_head);
    ck.push_scalar("meta.tau", state.tau);
    ck.push_scalar("meta.lambda_clu", state.lambda_clu);
    ck.push_scalar("meta.clusters", state.clusters as f64);
    ck.save(path)
}

pub fn load_stage1_state<F: Scalar>(path: &Path) -> PipeResult<ConsistentEncoderState<F>> {
    let ck = Checkpoint::load(path)?;
    if ck.module != "consistency" {
        return Err(corrupt(path, format!("module '{}', wanted stage 1", ck.module)));
    }
    Ok(ConsistentEncoderState {
        encoder: mlp_from(&ck, "encoder", Activation::Relu)?,
        contrastive_head: mlp_from(&ck, "contrastive", Activation::Relu)?,
        clustering_head: mlp_from(&ck, "clustering", Activation::Relu)?,
        tau: ck.scalar("meta.tau")?,
        lambda_clu: ck.scalar("meta.lambda_clu")?,
        clusters: ck.scalar("meta.clusters")? as usize,
    })
}

fn stage2_names(v: usize) -> (String, String, String, String) {
    (
        format!("views.{v}.enc"),
        format!("views.{v}.dec"),
        format!("cond.{v}"),
        format!("mix.{v}"),
    )
}

fn push_stage2_state<F: Scalar>(ck: &mut Checkpoint, st: &Stage2State<F>, epoch: usize) {
    ck.push_scalar("meta.views", st.n_views() as f64);
    ck.push_scalar("meta.d_z", st.d_z as f64);
    ck.push_scalar("meta.classes", st.classes as f64);
    ck.push_scalar("meta.cond_mode", cond_mode_code(st.cond_mode));
    ck.push_scalar("meta.epoch", epoch as f64);
    ck.push("prototypes", &st.class_prototypes);
    for v in 0..st.n_views() {
        let (enc, dec, cond, mix) = stage2_names(v);
        push_mlp(ck, &enc, &st.views[v].encoder);
        push_mlp(ck, &dec, &st.views[v].decoder);
        push_mlp(ck, &cond, &st.conditionals[v].net);
        for (name, t) in st.mixtures[v]
            .param_names(&mix)
            .into_iter()
            .zip(st.mixtures[v].params())
        {
            ck.push(name, t);
        }
    }
}

/// Inference checkpoint: the trained model without optimizer state.
/// [`load_stage2_state`] reads it; resuming training needs the trainer
/// variant below.
pub fn save_stage2_state<F: Scalar>(
    path: &Path,
    st: &Stage2State<F>,
    epoch: usize,
    config_hash: u64,
) -> PipeResult<()> {
    let mut ck = Checkpoint::new("disentangle", config_hash, RngState::zero());
    push_stage2_state(&mut ck, st, epoch);
    ck.save(path)
}

pub fn save_stage2_trainer<F: Scalar>(
    path: &Path,
    tr: &Stage2Trainer<F>,
    config_hash: u64,
) -> PipeResult<()> {
    let mut ck = Checkpoint::new("disentangle", config_hash, RngState::snapshot(&tr.rng));
    push_stage2_state(&mut ck, &tr.state, tr.epochs_done());
    for v in 0..tr.state.n_views() {
        push_adam(&mut ck, &format!("opt.q{v}"), &tr.q_opts[v]);
        push_adam(&mut ck, &format!("opt.r{v}"), &tr.r_opts[v]);
    }
    push_adam(&mut ck, "opt.model", &tr.model_opt);
    ck.save(path)
}

/// Rebuilds a mid-run trainer: parameters, optimizer moments, noise
/// stream and epoch counter all resume where the save left them.
pub fn load_stage2_trainer<F: Scalar>(
    path: &Path,
    cfg: &Stage2Config,
    view_dims: &[usize],
    d_e: usize,
    classes: usize,
    expect_hash: Option<u64>,
) -> PipeResult<Stage2Trainer<F>> {
    let ck = Checkpoint::load(path)?;
    if ck.module != "disentangle" {
        return Err(corrupt(path, format!("module '{}', wanted stage 2", ck.module)));
    }
    if let Some(h) = expect_hash {
        if h != ck.config_hash {
            return Err(corrupt(
                path,
                format!(
                    "config hash {:016x} does not match expected {h:016x}",
                    ck.config_hash
                ),
            ));
        }
    }
    let mut tr = Stage2Trainer::<F>::new(cfg, view_dims, d_e, classes)
        .map_err(|e| PipelineError::Invalid(e.to_string()))?;
    if ck.scalar("meta.views")? as usize != tr.state.n_views()
        || ck.scalar("meta.d_z")? as usize != tr.state.d_z
        || ck.scalar("meta.classes")? as usize != tr.state.classes
        || cond_mode_from(ck.scalar("meta.cond_mode")?)? != tr.state.cond_mode
    {
        return Err(corrupt(path, "stored architecture does not match the config"));
    }
    ck.restore_into("prototypes", &mut tr.state.class_prototypes)?;
    for v in 0..tr.state.n_views() {
        let (enc, dec, cond, mix) = stage2_names(v);
        restore_mlp(&ck, &enc, &mut tr.state.views[v].encoder)?;
        restore_mlp(&ck, &dec, &mut tr.state.views[v].decoder)?;
        restore_mlp(&ck, &cond, &mut tr.state.conditionals[v].net)?;
        for (name, t) in tr.state.mixtures[v]
            .param_names(&mix)
            .into_iter()
            .zip(tr.state.mixtures[v].params_mut())
        {
            ck.restore_into(&name, t)?;
        }
        restore_adam(&ck, &format!("opt.q{v}"), &mut tr.q_opts[v])?;
        restore_adam(&ck, &format!("opt.r{v}"), &mut tr.r_opts[v])?;
    }
    restore_adam(&ck, "opt.model", &mut tr.model_opt)?;
    tr.rng = ck.rng.restore();
    tr.epoch = ck.scalar("meta.epoch")? as usize;
    Ok(tr)
}

/// Inference-only load: rebuilds the trained stage-2 model from the
/// stored tensors alone (no config needed), for generation and readout.
pub fn load_stage2_state<F: Scalar>(path: &Path) -> PipeResult<(Stage2State<F>, u64)> {
    let ck = Checkpoint::load(path)?;
    if ck.module != "disentangle" {
        return Err(corrupt(path, format!("module '{}', wanted stage 2", ck.module)));
    }
    let n_views = ck.scalar("meta.views")? as usize;
    let d_z = ck.scalar("meta.d_z")? as usize;
    let classes = ck.scalar("meta.classes")? as usize;
    let cond_mode = cond_mode_from(ck.scalar("meta.cond_mode")?)?;
    let mut views = Vec::with_capacity(n_views);
    let mut conditionals = Vec::with_capacity(n_views);
    let mut mixtures = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let (enc, dec, cond, mix) = stage2_names(v);
        views.push(ViewCvae {
            encoder: mlp_from(&ck, &enc, Activation::Relu)?,
            decoder: mlp_from(&ck, &dec, Activation::Relu)?,
        });
        conditionals.push(VariationalConditional::from_parts(
            mlp_from(&ck, &cond, Activation::Relu)?,
            d_z,
        ));
        mixtures.push(MixtureOfGaussians {
            logits: ck.tensor(&format!("{mix}.logits"))?,
            means: ck.tensor(&format!("{mix}.means"))?,
            log_stds: ck.tensor(&format!("{mix}.log_stds"))?,
        });
    }
    Ok((
        Stage2State {
            views,
            conditionals,
            mixtures,
            class_prototypes: ck.tensor("prototypes")?,
            cond_mode,
            d_z,
            classes,
        },
        ck.config_hash,
    ))
}
