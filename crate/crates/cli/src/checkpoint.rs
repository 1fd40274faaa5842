//! Versioned binary checkpoints: network (with normalization branches),
//! optional discriminator, optimizer state, and RNG state. Round trips are
//! bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand_chacha::rand_core::SeedableRng;

use dsbn_core::domain::DomainId;
use dsbn_core::nn::{Layer, Network, NormLayer};
use dsbn_core::norm::{BnState, DsbnLayer};
use dsbn_core::optim::{Adam, Moments};
use dsbn_core::param::{ParamAlloc, Parameter};
use dsbn_core::pipeline::StageOutput;
use dsbn_core::tensor::Tensor;
use dsbn_core::RunRng;

const MAGIC: &[u8; 4] = b"DSBN";
const VERSION: u16 = 1;

const LAYER_LINEAR: u8 = 0;
const LAYER_RELU: u8 = 1;
const LAYER_BN: u8 = 2;
const LAYER_DSBN: u8 = 3;

const DOMAIN_SOURCE: u8 = 0;
const DOMAIN_TARGET: u8 = 1;

/// Serializes a trained stage to bytes.
pub fn to_bytes(stage: &StageOutput) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u16(VERSION);
    write_network(&mut w, &stage.network);
    match &stage.discriminator {
        Some(disc) => {
            w.u8(1);
            write_network(&mut w, disc);
        }
        None => w.u8(0),
    }
    write_adam(&mut w, stage, &stage.optimizer);
    write_rng(&mut w, &stage.rng);
    w.out
}

pub fn save(path: &Path, stage: &StageOutput) -> Result<()> {
    std::fs::write(path, to_bytes(stage))
        .with_context(|| format!("cannot write checkpoint {}", path.display()))
}

/// Deserializes a checkpoint. The returned stage carries no metrics (they
/// live in the run's metric log, not the checkpoint).
pub fn from_bytes(bytes: &[u8]) -> Result<StageOutput> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        bail!("not a checkpoint file (bad magic)");
    }
    let version = r.u16()?;
    if version != VERSION {
        bail!("unsupported checkpoint version {version}");
    }
    let mut alloc = ParamAlloc::new();
    let network = read_network(&mut r, &mut alloc)?;
    let discriminator = match r.u8()? {
        0 => None,
        1 => Some(read_network(&mut r, &mut alloc)?),
        other => bail!("bad discriminator flag {other}"),
    };
    let optimizer = read_adam(&mut r, &network, discriminator.as_ref())?;
    let rng = read_rng(&mut r)?;
    if r.pos != bytes.len() {
        bail!("trailing bytes in checkpoint");
    }
    Ok(StageOutput {
        network,
        discriminator,
        optimizer,
        rng,
        final_metrics: dsbn_core::data::Metrics {
            per_class: Vec::new(),
            class_avg: 0.0,
            overall: 0.0,
            n: 0,
        },
    })
}

pub fn load(path: &Path) -> Result<StageOutput> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    from_bytes(&bytes)
}

// ── Network section ─────────────────────────────────────────────────────

fn write_network(w: &mut Writer, net: &Network) {
    let layers = net.layers();
    w.u32(layers.len() as u32);
    for layer in layers {
        match layer {
            Layer::Linear { weight, bias } => {
                w.u8(LAYER_LINEAR);
                write_param(w, weight);
                write_param(w, bias);
            }
            Layer::Relu => w.u8(LAYER_RELU),
            Layer::Norm(NormLayer::Batch(state)) => {
                w.u8(LAYER_BN);
                write_bn_state(w, state);
            }
            Layer::Norm(NormLayer::DomainSpecific(layer)) => {
                w.u8(LAYER_DSBN);
                w.u32(layer.channels() as u32);
                w.u32(layer.branch_count() as u32);
                for (domain, state) in layer.branches() {
                    write_domain(w, domain);
                    write_bn_state(w, state);
                }
            }
        }
    }
}

fn read_network(r: &mut Reader, alloc: &mut ParamAlloc) -> Result<Network> {
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let tag = r.u8()?;
        layers.push(match tag {
            LAYER_LINEAR => {
                let weight = read_param(r, alloc)?;
                let bias = read_param(r, alloc)?;
                Layer::Linear { weight, bias }
            }
            LAYER_RELU => Layer::Relu,
            LAYER_BN => Layer::Norm(NormLayer::Batch(read_bn_state(r, alloc)?)),
            LAYER_DSBN => {
                let channels = r.u32()? as usize;
                let branches = r.u32()? as usize;
                let mut layer = DsbnLayer::new(channels);
                for _ in 0..branches {
                    let domain = read_domain(r)?;
                    let state = read_bn_state(r, alloc)?;
                    layer
                        .add_domain_branch(domain, state)
                        .map_err(|e| anyhow::anyhow!("corrupt dsbn layer: {e}"))?;
                }
                Layer::Norm(NormLayer::DomainSpecific(layer))
            }
            other => bail!("unknown layer tag {other}"),
        });
    }
    Ok(Network::from_layers(layers))
}

fn write_param(w: &mut Writer, p: &Parameter) {
    w.u8(p.trainable() as u8);
    write_tensor(w, p.value());
}

fn read_param(r: &mut Reader, alloc: &mut ParamAlloc) -> Result<Parameter> {
    let trainable = r.u8()? != 0;
    let value = read_tensor(r)?;
    Ok(Parameter::new(alloc, value, trainable))
}

fn write_bn_state(w: &mut Writer, state: &BnState) {
    w.u32(state.channels() as u32);
    w.f64(state.eps());
    w.f64(state.momentum());
    write_param(w, state.gamma());
    write_param(w, state.beta());
    w.f64_slice(state.running_mean());
    w.f64_slice(state.running_var());
}

fn read_bn_state(r: &mut Reader, alloc: &mut ParamAlloc) -> Result<BnState> {
    let channels = r.u32()? as usize;
    let eps = r.f64()?;
    let momentum = r.f64()?;
    let gamma = read_param(r, alloc)?;
    let beta = read_param(r, alloc)?;
    let mean = r.f64_vec(channels)?;
    let var = r.f64_vec(channels)?;
    let mut state = BnState::identity(channels, eps, momentum, alloc);
    state
        .gamma_mut()
        .value_mut()
        .values_mut()
        .copy_from_slice(gamma.value().values());
    state
        .beta_mut()
        .value_mut()
        .values_mut()
        .copy_from_slice(beta.value().values());
    state.set_running(mean, var);
    Ok(state)
}

fn write_tensor(w: &mut Writer, t: &Tensor) {
    w.u8(t.shape().len() as u8);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    for &v in t.values() {
        w.f64(v);
    }
}

fn read_tensor(r: &mut Reader) -> Result<Tensor> {
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let count: usize = shape.iter().product();
    let values = r.f64_vec(count)?;
    Tensor::new(&shape, values).map_err(|e| anyhow::anyhow!("corrupt tensor: {e}"))
}

fn write_domain(w: &mut Writer, d: DomainId) {
    match d {
        DomainId::Source(i) => {
            w.u8(DOMAIN_SOURCE);
            w.u16(i);
        }
        DomainId::Target => {
            w.u8(DOMAIN_TARGET);
            w.u16(0);
        }
    }
}

fn read_domain(r: &mut Reader) -> Result<DomainId> {
    let tag = r.u8()?;
    let idx = r.u16()?;
    match tag {
        DOMAIN_SOURCE => Ok(DomainId::Source(idx)),
        DOMAIN_TARGET => Ok(DomainId::Target),
        other => bail!("unknown domain tag {other}"),
    }
}

// ── Optimizer section ───────────────────────────────────────────────────
//
// Moments are stored by parameter visit order (network first, then the
// discriminator), so fresh parameter ids assigned on load line up.

fn write_adam(w: &mut Writer, stage: &StageOutput, adam: &Adam) {
    w.f64(adam.beta1());
    w.f64(adam.beta2());
    w.f64(adam.eps());
    w.u64(adam.step_count());
    let (b1, b2) = adam.beta_pows();
    w.f64(b1);
    w.f64(b2);

    let moments: BTreeMap<_, &Moments> = adam.moments().collect();
    let mut order = Vec::new();
    stage.network.visit_params(&mut |p| order.push(p.id()));
    if let Some(disc) = &stage.discriminator {
        disc.visit_params(&mut |p| order.push(p.id()));
    }
    w.u32(order.len() as u32);
    for id in order {
        match moments.get(&id) {
            Some(m) => {
                w.u8(1);
                w.u32(m.m.len() as u32);
                w.f64_slice(&m.m);
                w.f64_slice(&m.v);
            }
            None => w.u8(0),
        }
    }
}

fn read_adam(r: &mut Reader, network: &Network, disc: Option<&Network>) -> Result<Adam> {
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let eps = r.f64()?;
    let step = r.u64()?;
    let b1_pow = r.f64()?;
    let b2_pow = r.f64()?;

    let mut order = Vec::new();
    network.visit_params(&mut |p| order.push(p.id()));
    if let Some(d) = disc {
        d.visit_params(&mut |p| order.push(p.id()));
    }
    let stored = r.u32()? as usize;
    if stored != order.len() {
        bail!(
            "checkpoint optimizer covers {stored} parameters, model has {}",
            order.len()
        );
    }
    let mut moments = BTreeMap::new();
    for id in order {
        if r.u8()? == 1 {
            let n = r.u32()? as usize;
            let m = r.f64_vec(n)?;
            let v = r.f64_vec(n)?;
            moments.insert(id, Moments { m, v });
        }
    }
    Ok(Adam::restore(beta1, beta2, eps, step, b1_pow, b2_pow, moments))
}

// ── RNG section ─────────────────────────────────────────────────────────

fn write_rng(w: &mut Writer, rng: &RunRng) {
    w.bytes(&rng.get_seed());
    w.u64(rng.get_stream());
    w.u128(rng.get_word_pos());
}

fn read_rng(r: &mut Reader) -> Result<RunRng> {
    let mut seed = [0u8; 32];
    seed.copy_from_slice(r.take(32)?);
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let mut rng = RunRng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

// ── Little-endian byte plumbing ─────────────────────────────────────────

#[derive(Default)]
struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.out.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn f64_slice(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!("checkpoint truncated");
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}
