//! Binary QKV traces (`.mikv`) and synthetic trace generators.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       6     magic "MIKV1\0"
//! 6       4     version (u32, = 1)
//! 10      4     n_layers
//! 14      4     n_heads
//! 18      4     n_kv_heads
//! 22      4     head_dim
//! 26      4     n_prefill
//! 30      4     n_gen
//! 34      1     rope_applied (0/1)
//! 35      3     reserved, zero
//! 38      ...   payload: for each step, for each layer:
//!               Q[n_heads*head_dim] K[n_kv_heads*head_dim] V[n_kv_heads*head_dim]
//!               as f32 LE, row-major
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cache::ModelDims;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 6] = *b"MIKV1\0";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 38;

/// Default magnitude multiplier for planted outlier channels.
pub const DEFAULT_OUTLIER_FACTOR: f32 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub n_layers: u32,
    pub n_heads: u32,
    pub n_kv_heads: u32,
    pub head_dim: u32,
    pub n_prefill: u32,
    pub n_gen: u32,
    pub rope_applied: bool,
}

impl TraceHeader {
    pub fn new(dims: ModelDims, n_prefill: usize, n_gen: usize, rope_applied: bool) -> Self {
        Self {
            version: VERSION,
            n_layers: dims.n_layers as u32,
            n_heads: dims.n_heads as u32,
            n_kv_heads: dims.n_kv_heads as u32,
            head_dim: dims.head_dim as u32,
            n_prefill: n_prefill as u32,
            n_gen: n_gen as u32,
            rope_applied,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_layers: self.n_layers as usize,
            n_heads: self.n_heads as usize,
            n_kv_heads: self.n_kv_heads as usize,
            head_dim: self.head_dim as usize,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.n_prefill as usize + self.n_gen as usize
    }

    fn floats_per_layer(&self) -> usize {
        (self.n_heads as usize + 2 * self.n_kv_heads as usize) * self.head_dim as usize
    }

    pub fn payload_floats(&self) -> usize {
        self.n_steps() * self.n_layers as usize * self.floats_per_layer()
    }

    pub fn payload_bytes(&self) -> u64 {
        self.payload_floats() as u64 * 4
    }

    pub fn file_bytes(&self) -> u64 {
        HEADER_LEN as u64 + self.payload_bytes()
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut buf = [0u8; HEADER_LEN];
        buf[..6].copy_from_slice(&MAGIC);
        let fields = [
            self.version,
            self.n_layers,
            self.n_heads,
            self.n_kv_heads,
            self.head_dim,
            self.n_prefill,
            self.n_gen,
        ];
        for (i, f) in fields.iter().enumerate() {
            buf[6 + 4 * i..10 + 4 * i].copy_from_slice(&f.to_le_bytes());
        }
        buf[34] = u8::from(self.rope_applied);
        buf
    }

    fn decode(buf: &[u8; HEADER_LEN]) -> Result<Self> {
        if buf[..6] != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"MIKV1\\0\""));
        }
        let field = |i: usize| u32::from_le_bytes(buf[6 + 4 * i..10 + 4 * i].try_into().unwrap());
        let version = field(0);
        if version != VERSION {
            return Err(Error::format(
                6,
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let rope_applied = match buf[34] {
            0 => false,
            1 => true,
            other => {
                return Err(Error::format(
                    34,
                    format!("rope_applied must be 0 or 1, got {other}"),
                ))
            }
        };
        if buf[35..38] != [0, 0, 0] {
            return Err(Error::format(35, "reserved bytes must be zero"));
        }
        let header = Self {
            version,
            n_layers: field(1),
            n_heads: field(2),
            n_kv_heads: field(3),
            head_dim: field(4),
            n_prefill: field(5),
            n_gen: field(6),
            rope_applied,
        };
        header
            .dims()
            .validate()
            .map_err(|e| Error::format(10, e.to_string()))?;
        Ok(header)
    }
}

/// A fully loaded trace. Immutable after load and safe to share across threads.
#[derive(Clone, Debug)]
pub struct Trace {
    pub header: TraceHeader,
    data: Vec<f32>,
}

impl Trace {
    /// All-zero trace with the given shape.
    pub fn zeros(header: TraceHeader) -> Self {
        let n = header.payload_floats();
        Self {
            header,
            data: vec![0.0; n],
        }
    }

    pub fn from_parts(header: TraceHeader, data: Vec<f32>) -> Result<Self> {
        if data.len() != header.payload_floats() {
            return Err(Error::invalid(format!(
                "payload has {} floats, header implies {}",
                data.len(),
                header.payload_floats()
            )));
        }
        Ok(Self { header, data })
    }

    pub fn dims(&self) -> ModelDims {
        self.header.dims()
    }

    pub fn n_prefill(&self) -> usize {
        self.header.n_prefill as usize
    }

    pub fn n_gen(&self) -> usize {
        self.header.n_gen as usize
    }

    pub fn n_steps(&self) -> usize {
        self.header.n_steps()
    }

    pub fn payload(&self) -> &[f32] {
        &self.data
    }

    fn layer_base(&self, step: usize, layer: usize) -> usize {
        let h = &self.header;
        assert!(step < h.n_steps() && layer < h.n_layers as usize);
        (step * h.n_layers as usize + layer) * h.floats_per_layer()
    }

    fn range_q(&self, step: usize, layer: usize, head: usize) -> std::ops::Range<usize> {
        let d = self.header.head_dim as usize;
        assert!(head < self.header.n_heads as usize);
        let start = self.layer_base(step, layer) + head * d;
        start..start + d
    }

    fn range_k(&self, step: usize, layer: usize, kv_head: usize) -> std::ops::Range<usize> {
        let d = self.header.head_dim as usize;
        assert!(kv_head < self.header.n_kv_heads as usize);
        let start = self.layer_base(step, layer) + (self.header.n_heads as usize + kv_head) * d;
        start..start + d
    }

    fn range_v(&self, step: usize, layer: usize, kv_head: usize) -> std::ops::Range<usize> {
        let d = self.header.head_dim as usize;
        let off = self.header.n_kv_heads as usize * d;
        let r = self.range_k(step, layer, kv_head);
        r.start + off..r.end + off
    }

    pub fn q(&self, step: usize, layer: usize, head: usize) -> &[f32] {
        &self.data[self.range_q(step, layer, head)]
    }

    pub fn k(&self, step: usize, layer: usize, kv_head: usize) -> &[f32] {
        &self.data[self.range_k(step, layer, kv_head)]
    }

    pub fn v(&self, step: usize, layer: usize, kv_head: usize) -> &[f32] {
        &self.data[self.range_v(step, layer, kv_head)]
    }

    pub fn q_mut(&mut self, step: usize, layer: usize, head: usize) -> &mut [f32] {
        let r = self.range_q(step, layer, head);
        &mut self.data[r]
    }

    pub fn k_mut(&mut self, step: usize, layer: usize, kv_head: usize) -> &mut [f32] {
        let r = self.range_k(step, layer, kv_head);
        &mut self.data[r]
    }

    pub fn v_mut(&mut self, step: usize, layer: usize, kv_head: usize) -> &mut [f32] {
        let r = self.range_v(step, layer, kv_head);
        &mut self.data[r]
    }

    /// Bitwise equality, NaN payloads included.
    pub fn bit_eq(&self, other: &Trace) -> bool {
        self.header == other.header
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_trace(BufReader::new(File::open(path)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_trace(self, &mut w)?;
        w.flush()?;
        Ok(())
    }
}

pub fn write_trace(trace: &Trace, mut sink: impl Write) -> Result<()> {
    sink.write_all(&trace.header.encode())?;
    let mut buf = Vec::with_capacity(trace.data.len() * 4);
    for v in &trace.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub fn read_trace(mut source: impl Read) -> Result<Trace> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("file is {} bytes, header needs {HEADER_LEN}", bytes.len()),
        ));
    }
    let header = TraceHeader::decode(bytes[..HEADER_LEN].try_into().unwrap())?;
    let expected = header.file_bytes();
    if bytes.len() as u64 != expected {
        return Err(Error::format(
            bytes.len().min(expected as usize) as u64,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Trace { header, data })
}

/// Which side of the query/key product carries a planted outlier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierTarget {
    Key,
    Query,
    Both,
}

/// A systematic outlier channel: `(kv head, channel)` scaled by `factor` at every token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub head: usize,
    pub channel: usize,
    pub factor: f32,
    pub target: OutlierTarget,
}

impl OutlierSpec {
    pub fn key(head: usize, channel: usize, factor: f32) -> Self {
        Self {
            head,
            channel,
            factor,
            target: OutlierTarget::Key,
        }
    }

    fn check(&self, dims: &ModelDims) -> Result<()> {
        if self.head >= dims.n_kv_heads || self.channel >= dims.head_dim {
            return Err(Error::invalid(format!(
                "outlier {}:{} outside {} kv heads x {} channels",
                self.head, self.channel, dims.n_kv_heads, dims.head_dim
            )));
        }
        if !(self.factor.is_finite() && self.factor > 0.0) {
            return Err(Error::invalid(format!(
                "outlier factor {} must be positive",
                self.factor
            )));
        }
        Ok(())
    }
}

/// Parses `head:channel:factor[:k|q|qk]`; the target defaults to keys.
impl FromStr for OutlierSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(Error::invalid(format!(
                "outlier '{s}' must look like head:channel:factor[:k|q|qk]"
            )));
        }
        let bad = |what: &str| Error::invalid(format!("outlier '{s}': bad {what}"));
        let head = parts[0].parse().map_err(|_| bad("head"))?;
        let channel = parts[1].parse().map_err(|_| bad("channel"))?;
        let factor = parts[2].parse().map_err(|_| bad("factor"))?;
        let target = match parts.get(3).copied() {
            None | Some("k") => OutlierTarget::Key,
            Some("q") => OutlierTarget::Query,
            Some("qk") => OutlierTarget::Both,
            Some(_) => return Err(bad("target")),
        };
        Ok(Self {
            head,
            channel,
            factor,
            target,
        })
    }
}

fn gaussian_fill(rng: &mut ChaCha8Rng, out: &mut [f32]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}

/// Unit-Gaussian trace with optional systematic outlier channels.
///
/// The trace is marked `rope_applied`; clear the header flag to have replay
/// rotate it instead.
pub fn synth_random(
    dims: ModelDims,
    n_prefill: usize,
    n_gen: usize,
    seed: u64,
    outliers: &[OutlierSpec],
) -> Result<Trace> {
    dims.validate()?;
    for o in outliers {
        o.check(&dims)?;
    }
    let mut trace = Trace::zeros(TraceHeader::new(dims, n_prefill, n_gen, true));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_fill(&mut rng, &mut trace.data);

    let group = dims.group_factor();
    for step in 0..trace.n_steps() {
        for layer in 0..dims.n_layers {
            for o in outliers {
                if matches!(o.target, OutlierTarget::Key | OutlierTarget::Both) {
                    trace.k_mut(step, layer, o.head)[o.channel] *= o.factor;
                }
                if matches!(o.target, OutlierTarget::Query | OutlierTarget::Both) {
                    for h in o.head * group..(o.head + 1) * group {
                        trace.q_mut(step, layer, h)[o.channel] *= o.factor;
                    }
                }
            }
        }
    }
    Ok(trace)
}

/// Needle index expected at each generation step.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnswerKey(pub BTreeMap<usize, usize>);

impl AnswerKey {
    pub fn needle(&self, step: usize) -> Option<usize> {
        self.0.get(&step).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    /// Sidecar path: `t.mikv` -> `t.answers.json`.
    pub fn sidecar_path(trace_path: &Path) -> PathBuf {
        trace_path.with_extension("answers.json")
    }
}

pub const DISTRACTORS_PER_PAIR: usize = 4;
const MAX_PLANTED_COS: f64 = 0.3;
const MAX_NEEDLE_COS: f64 = 0.5;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSpec {
    pub n_pairs: usize,
    pub n_prefill: usize,
    pub n_gen: usize,
    /// Multiplier applied to each planted query, in units of `sqrt(head_dim)`.
    pub query_gain: f32,
    pub outliers: Vec<OutlierSpec>,
}

impl Default for RetrievalSpec {
    fn default() -> Self {
        Self {
            n_pairs: 16,
            n_prefill: 96,
            n_gen: 16,
            query_gain: 8.0,
            outliers: Vec::new(),
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest pairwise |cos| between planted keys; keys are unit vectors.
pub fn max_planted_cos(keys: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            worst = worst.max(dot64(&keys[i], &keys[j]).abs());
        }
    }
    worst
}

/// Desk-scale line retrieval.
///
/// Each `(layer, kv_head)` gets `n_pairs` near-orthogonal planted keys hidden
/// among distractors in the prefill, every generation query is a scaled copy
/// of one planted key, and the answer key records which prefill token each
/// step should retrieve. Planted outliers rescale a channel on one side of the
/// query/key product and divide the other side by the same factor, so full
/// precision logits are untouched while the stored tensors carry the outlier.
pub fn synth_retrieval(
    dims: ModelDims,
    spec: &RetrievalSpec,
    seed: u64,
) -> Result<(Trace, AnswerKey)> {
    dims.validate()?;
    let d = dims.head_dim;
    if spec.n_pairs == 0 {
        return Err(Error::invalid("retrieval needs at least one pair"));
    }
    if d < 4 * spec.n_pairs {
        return Err(Error::invalid(format!(
            "{} pairs need head_dim >= {} for near-orthogonal keys (have {d}); use at most {} pairs",
            spec.n_pairs,
            4 * spec.n_pairs,
            d / 4
        )));
    }
    let min_prefill = spec.n_pairs * (1 + DISTRACTORS_PER_PAIR);
    if spec.n_prefill < min_prefill {
        return Err(Error::invalid(format!(
            "{} pairs with {DISTRACTORS_PER_PAIR} distractors each need n_prefill >= {min_prefill}",
            spec.n_pairs
        )));
    }
    if !(spec.query_gain.is_finite() && spec.query_gain > 0.0) {
        return Err(Error::invalid("query_gain must be positive"));
    }
    // per (kv head, channel): scale on the key side; the query side gets the inverse
    let mut key_scale = vec![1.0f64; dims.n_kv_heads * d];
    for o in &spec.outliers {
        o.check(&dims)?;
        let s = &mut key_scale[o.head * d + o.channel];
        match o.target {
            OutlierTarget::Key => *s *= f64::from(o.factor),
            OutlierTarget::Query => *s /= f64::from(o.factor),
            OutlierTarget::Both => {
                return Err(Error::invalid(
                    "retrieval outliers must target either keys or queries, not both",
                ))
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_steps = spec.n_prefill + spec.n_gen;
    let mut positions: Vec<usize> = (0..spec.n_prefill).collect();
    positions.shuffle(&mut rng);
    let mut needles = positions[..spec.n_pairs].to_vec();
    needles.sort_unstable();

    let mut answers = BTreeMap::new();
    let mut order: Vec<usize> = Vec::new();
    for s in 0..spec.n_gen {
        if order.is_empty() {
            order = (0..spec.n_pairs).collect();
            order.shuffle(&mut rng);
        }
        answers.insert(s, needles[order.pop().unwrap()]);
    }

    let mut trace = Trace::zeros(TraceHeader::new(dims, spec.n_prefill, spec.n_gen, true));
    let gain = f64::from(spec.query_gain) * (d as f64).sqrt();
    let group = dims.group_factor();

    for layer in 0..dims.n_layers {
        for kv in 0..dims.n_kv_heads {
            let latent = draw_latents(&mut rng, d, n_steps, &needles)?;
            let scale = &key_scale[kv * d..(kv + 1) * d];
            for (step, u) in latent.iter().enumerate() {
                let k = trace.k_mut(step, layer, kv);
                for c in 0..d {
                    k[c] = (u[c] * scale[c]) as f32;
                }
                let v = unit_vector(&mut rng, d);
                for (dst, src) in trace.v_mut(step, layer, kv).iter_mut().zip(&v) {
                    *dst = *src as f32;
                }
            }
            for step in 0..n_steps {
                for h in kv * group..(kv + 1) * group {
                    let dir = match step.checked_sub(spec.n_prefill) {
                        Some(s) => latent[answers[&s]].clone(),
                        None => unit_vector(&mut rng, d),
                    };
                    let q = trace.q_mut(step, layer, h);
                    for c in 0..d {
                        q[c] = (gain * dir[c] / scale[c]) as f32;
                    }
                }
            }
        }
    }
    Ok((trace, AnswerKey(answers)))
}

/// Latent key directions for one head, regenerated until planted keys are
/// near-orthogonal and every other token stays clear of every needle.
fn draw_latents(
    rng: &mut ChaCha8Rng,
    d: usize,
    n_steps: usize,
    needles: &[usize],
) -> Result<Vec<Vec<f64>>> {
    for _ in 0..MAX_ATTEMPTS {
        let latent: Vec<Vec<f64>> = (0..n_steps).map(|_| unit_vector(rng, d)).collect();
        let planted: Vec<Vec<f64>> = needles.iter().map(|&i| latent[i].clone()).collect();
        if max_planted_cos(&planted) >= MAX_PLANTED_COS {
            continue;
        }
        let clear = needles.iter().all(|&n| {
            latent
                .iter()
                .enumerate()
                .all(|(j, u)| j == n || dot64(&latent[n], u).abs() < MAX_NEEDLE_COS)
        });
        if clear {
            return Ok(latent);
        }
    }
    Err(Error::invalid(format!(
        "could not draw {} near-orthogonal keys in {d} dims after {MAX_ATTEMPTS} attempts",
        needles.len()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(l: usize, h: usize, g: usize, d: usize) -> ModelDims {
        ModelDims::new(l, h, g, d).unwrap()
    }

    fn bytes_of(t: &Trace) -> Vec<u8> {
        let mut out = Vec::new();
        write_trace(t, &mut out).unwrap();
        out
    }

    #[test]
    fn minimal_round_trip() {
        let mut t = Trace::zeros(TraceHeader::new(dims(1, 1, 1, 2), 1, 0, false));
        t.q_mut(0, 0, 0).copy_from_slice(&[1.0, -2.0]);
        t.k_mut(0, 0, 0).copy_from_slice(&[0.5, 0.25]);
        t.v_mut(0, 0, 0).copy_from_slice(&[3.0, 4.0]);
        let bytes = bytes_of(&t);
        assert_eq!(bytes.len(), HEADER_LEN + 6 * 4);
        let back = read_trace(&bytes[..]).unwrap();
        assert!(back.bit_eq(&t));
        assert_eq!(back.k(0, 0, 0), &[0.5, 0.25]);
    }

    #[test]
    fn header_bytes_are_fixed() {
        let t = Trace::zeros(TraceHeader::new(dims(2, 4, 2, 8), 3, 1, true));
        let b = bytes_of(&t);
        assert_eq!(&b[..6], b"MIKV1\0");
        assert_eq!(&b[6..10], &1u32.to_le_bytes());
        assert_eq!(&b[10..14], &2u32.to_le_bytes());
        assert_eq!(&b[14..18], &4u32.to_le_bytes());
        assert_eq!(&b[18..22], &2u32.to_le_bytes());
        assert_eq!(&b[22..26], &8u32.to_le_bytes());
        assert_eq!(&b[26..30], &3u32.to_le_bytes());
        assert_eq!(&b[30..34], &1u32.to_le_bytes());
        assert_eq!(b[34], 1);
        assert_eq!(&b[35..38], &[0, 0, 0]);
        assert_eq!(b.len() as u64, 38 + 4 * 2 * (4 + 4) * 8 * 4);
    }

    #[test]
    fn truncation_names_lengths() {
        let t = synth_random(dims(1, 2, 1, 4), 2, 1, 1, &[]).unwrap();
        let mut b = bytes_of(&t);
        let full = b.len();
        b.pop();
        match read_trace(&b[..]) {
            Err(Error::Format { message, .. }) => {
                assert!(message.contains(&full.to_string()), "{message}");
                assert!(message.contains(&(full - 1).to_string()), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let t = synth_random(dims(1, 1, 1, 2), 1, 0, 1, &[]).unwrap();
        let mut b = bytes_of(&t);
        b[0] = b'X';
        assert!(matches!(
            read_trace(&b[..]),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut b = bytes_of(&t);
        b[6] = 9;
        assert!(matches!(
            read_trace(&b[..]),
            Err(Error::Format { offset: 6, .. })
        ));
        let mut b = bytes_of(&t);
        b[18..22].copy_from_slice(&3u32.to_le_bytes()); // kv heads must divide heads
        assert!(matches!(read_trace(&b[..]), Err(Error::Format { .. })));
    }

    #[test]
    fn same_seed_same_trace() {
        let o = [OutlierSpec::key(0, 3, 50.0)];
        let a = synth_random(dims(2, 2, 1, 8), 4, 2, 9, &o).unwrap();
        let b = synth_random(dims(2, 2, 1, 8), 4, 2, 9, &o).unwrap();
        let c = synth_random(dims(2, 2, 1, 8), 4, 2, 10, &o).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn outlier_parsing() {
        let o: OutlierSpec = "0:7:50".parse().unwrap();
        assert_eq!(o, OutlierSpec::key(0, 7, 50.0));
        let o: OutlierSpec = "1:2:10:qk".parse().unwrap();
        assert_eq!(o.target, OutlierTarget::Both);
        assert!("0:7".parse::<OutlierSpec>().is_err());
        assert!("0:x:5".parse::<OutlierSpec>().is_err());
        assert!("0:1:5:z".parse::<OutlierSpec>().is_err());
    }

    #[test]
    fn no_outlier_maxima_stay_in_band() {
        let t = synth_random(dims(1, 1, 1, 64), 128, 0, 3, &[]).unwrap();
        let mut maxima: Vec<f32> = (0..64)
            .map(|c| (0..128).map(|s| t.k(s, 0, 0)[c].abs()).fold(0.0, f32::max))
            .collect();
        let top = maxima.iter().cloned().fold(0.0, f32::max);
        maxima.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = maxima[32];
        assert!(top < 3.0 * median, "top {top} median {median}");
    }

    #[test]
    fn retrieval_rejects_infeasible() {
        let spec = RetrievalSpec {
            n_pairs: 40,
            ..Default::default()
        };
        match synth_retrieval(dims(1, 1, 1, 128), &spec, 0) {
            Err(Error::InvalidInput(m)) => assert!(m.contains("160"), "{m}"),
            other => panic!("{other:?}"),
        }
        let spec = RetrievalSpec {
            n_prefill: 50,
            ..Default::default()
        };
        assert!(synth_retrieval(dims(1, 1, 1, 128), &spec, 0).is_err());
    }

    #[test]
    fn retrieval_layout() {
        let (t, key) = synth_retrieval(dims(1, 2, 1, 128), &RetrievalSpec::default(), 7).unwrap();
        assert_eq!(t.n_prefill(), 96);
        assert_eq!(key.len(), 16);
        assert!(t.header.rope_applied);
        // each needle asked exactly once in the first round
        let mut asked: Vec<usize> = key.0.values().copied().collect();
        asked.sort_unstable();
        asked.dedup();
        assert_eq!(asked.len(), 16);
        // with no outliers the query is a scaled copy of the needle key
        let n = key.needle(0).unwrap();
        let q = t.q(96, 0, 0);
        let k = t.k(n, 0, 0);
        let ratio = q[0] / k[0];
        for c in 0..128 {
            assert!((q[c] - ratio * k[c]).abs() < 1e-4 * q[c].abs().max(1.0));
        }
        assert_eq!(t.q(96, 0, 0), t.q(96, 0, 1));
    }

    #[test]
    fn retrieval_planted_keys_are_near_orthogonal() {
        let (t, key) = synth_retrieval(dims(2, 2, 2, 128), &RetrievalSpec::default(), 7).unwrap();
        let mut needles: Vec<usize> = key.0.values().copied().collect();
        needles.sort_unstable();
        needles.dedup();
        for layer in 0..2 {
            for kv in 0..2 {
                let keys: Vec<Vec<f64>> = needles
                    .iter()
                    .map(|&n| t.k(n, layer, kv).iter().map(|&x| f64::from(x)).collect())
                    .collect();
                assert!(max_planted_cos(&keys) < 0.3 + 1e-6);
            }
        }
    }

    #[test]
    fn answer_key_json_shape() {
        let key = AnswerKey(BTreeMap::from([(0, 12), (1, 40)]));
        let s = serde_json::to_string(&key).unwrap();
        assert_eq!(s, r#"{"0":12,"1":40}"#);
        let back: AnswerKey = serde_json::from_str(&s).unwrap();
        assert_eq!(back, key);
        assert_eq!(
            AnswerKey::sidecar_path(Path::new("runs/t.mikv")),
            PathBuf::from("runs/t.answers.json")
        );
    }
}
