//! Attention math on extracted `(Q, K, V)` features.

use std::collections::BTreeMap;
use std::fmt;

use gradcore::{Real, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};

/// Which feature trajectory a tap belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stream {
    Content,
    /// Style image, indexed from 0.
    Style(usize),
    Output,
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stream::Content => write!(f, "content"),
            Stream::Style(i) => write!(f, "style{i}"),
            Stream::Output => write!(f, "output"),
        }
    }
}

impl Stream {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "content" => Some(Stream::Content),
            "output" => Some(Stream::Output),
            _ => s.strip_prefix("style")?.parse().ok().map(Stream::Style),
        }
    }
}

/// Recorded `(Q, K, V)` of one self-attention block, each `[h, s, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTap<E: Real = f32> {
    pub block: usize,
    pub timestep: usize,
    pub stream: Stream,
    pub q: Tensor<E>,
    pub k: Tensor<E>,
    pub v: Tensor<E>,
}

impl<E: Real> AttentionTap<E> {
    /// `(h, s, d)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.v.shape();
        (s[0], s[1], s[2])
    }
}

fn check_head_dims(op: &'static str, q: &[usize], k: &[usize], v: &[usize]) -> Result<(), TensorError> {
    let ok = q.len() == 3
        && k.len() == 3
        && v.len() == 3
        && q[0] == k[0]
        && k[0] == v[0]
        && q[2] == k[2]
        && k[1] == v[1];
    if !ok {
        return Err(TensorError::Dimension {
            op,
            msg: format!("incompatible head layouts q={q:?} k={k:?} v={v:?}"),
        });
    }
    Ok(())
}

/// Differentiable `softmax(τ · Q Kᵀ / √d) · V` per head.
pub fn attention_var<'t, E: Real>(q: Var<'t, E>, k: Var<'t, E>, v: Var<'t, E>, tau: f64) -> Result<Var<'t, E>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    check_head_dims("attention", &qs, &ks, &vs)?;
    if !(tau > 0.0) {
        return Err(Error::config(format!("attention temperature must be positive, got {tau}")));
    }
    let d = qs[2] as f64;
    let scores = q.matmul_t(k)?.scale(E::from_f64_lossy(tau / d.sqrt()))?;
    Ok(scores.softmax_lastdim()?.matmul(v)?)
}

/// Non-differentiable [`attention_var`].
pub fn attention<E: Real>(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>, tau: f64) -> Result<Tensor<E>> {
    let tape = Tape::new();
    let out = attention_var(
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
        tau,
    )?;
    Ok(out.value().as_ref().clone())
}

/// StyleID query blending `γ·Q_c + (1−γ)·Q_cs`.
pub fn blend_queries<E: Real>(q_content: &Tensor<E>, q_output: &Tensor<E>, gamma: f64) -> Result<Tensor<E>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    if gamma == 1.0 {
        return Ok(q_content.clone());
    }
    if gamma == 0.0 {
        return Ok(q_output.clone());
    }
    let g = E::from_f64_lossy(gamma);
    let h = E::one() - g;
    Ok(q_content.zip_map(q_output, "blend_queries", |c, o| g * c + h * o)?)
}

pub const ADAIN_EPS: f64 = 1e-5;

/// Per-channel renormalization of `x` (`[C, ...]`) to the statistics of `y`.
///
/// Uses population standard deviation: `σ_y·(x−μ_x)/(σ_x+ε) + μ_y`.
pub fn adain<E: Real>(x: &Tensor<E>, y: &Tensor<E>) -> Result<Tensor<E>> {
    let c = x.shape()[0];
    if y.shape()[0] != c {
        return Err(TensorError::Shape {
            op: "adain",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        }
        .into());
    }
    let (xp, yp) = (x.len() / c, y.len() / c);
    let stats = |d: &[E]| {
        let n = d.len() as f64;
        let mean = d.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
        let var = d.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        let xs = &x.data()[ch * xp..(ch + 1) * xp];
        let (mx, sx) = stats(xs);
        let (my, sy) = stats(&y.data()[ch * yp..(ch + 1) * yp]);
        out.extend(
            xs.iter()
                .map(|v| E::from_f64_lossy(sy * (v.to_f64_lossy() - mx) / (sx + ADAIN_EPS) + my)),
        );
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// Concatenate `[h, s, d]` tensors along the sequence axis in order.
pub fn concat_sequence<E: Real>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let first = parts.first().ok_or_else(|| Error::config("no tensors to concatenate"))?;
    let (h, d) = (first.shape()[0], first.shape()[2]);
    for p in parts {
        if p.ndim() != 3 || p.shape()[0] != h || p.shape()[2] != d {
            return Err(TensorError::Shape {
                op: "concat_sequence",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            }
            .into());
        }
    }
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(h * total * d);
    for head in 0..h {
        for p in parts {
            let s = p.shape()[1];
            data.extend_from_slice(&p.data()[head * s * d..(head + 1) * s * d]);
        }
    }
    Ok(Tensor::new(vec![h, total, d], data)?)
}

/// Joint `(K, V)` of several style taps, concatenated along the sequence
/// axis in style-image order.
pub fn concat_style_features<E: Real>(taps: &[&AttentionTap<E>]) -> Result<(Tensor<E>, Tensor<E>)> {
    let first = taps.first().ok_or_else(|| Error::config("no style taps"))?;
    if taps.iter().any(|t| t.dims() != first.dims() || t.k.shape() != first.k.shape()) {
        return Err(Error::config("style taps have heterogeneous shapes"));
    }
    let ks: Vec<_> = taps.iter().map(|t| &t.k).collect();
    let vs: Vec<_> = taps.iter().map(|t| &t.v).collect();
    Ok((concat_sequence(&ks)?, concat_sequence(&vs)?))
}

/// Per `(stream, timestep, block)` taps of one transfer job.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache<E: Real = f32> {
    n_styles: usize,
    taps: BTreeMap<(Stream, usize, usize), AttentionTap<E>>,
}

impl<E: Real> FeatureCache<E> {
    pub fn new(n_styles: usize) -> Self {
        FeatureCache {
            n_styles,
            taps: BTreeMap::new(),
        }
    }

    pub fn n_styles(&self) -> usize {
        self.n_styles
    }

    pub fn insert(&mut self, tap: AttentionTap<E>) -> Result<()> {
        if let Stream::Style(i) = tap.stream {
            if i >= self.n_styles {
                return Err(Error::config(format!("style index {i} beyond {} styles", self.n_styles)));
            }
            let sibling = (0..self.n_styles)
                .filter_map(|j| self.taps.get(&(Stream::Style(j), tap.timestep, tap.block)))
                .next();
            if let Some(other) = sibling {
                if other.dims() != tap.dims() {
                    return Err(Error::config("style taps at one (t, block) must share (h, s, d)"));
                }
            }
        }
        self.taps.insert((tap.stream, tap.timestep, tap.block), tap);
        Ok(())
    }

    pub fn get(&self, stream: Stream, timestep: usize, block: usize) -> Option<&AttentionTap<E>> {
        self.taps.get(&(stream, timestep, block))
    }

    pub fn style_taps(&self, timestep: usize, block: usize) -> Option<Vec<&AttentionTap<E>>> {
        (0..self.n_styles)
            .map(|i| self.get(Stream::Style(i), timestep, block))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AttentionTap<E>> {
        self.taps.values()
    }

    /// True when every listed stream has a tap for every `(t, block)` pair.
    pub fn is_complete(&self, timesteps: &[usize], blocks: &[usize], streams: &[Stream]) -> bool {
        timesteps.iter().all(|&t| {
            blocks
                .iter()
                .all(|&b| streams.iter().all(|&s| self.taps.contains_key(&(s, t, b))))
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("FEAT", serde_json::json!({ "n_styles": self.n_styles }));
        for ((stream, t, b), tap) in &self.taps {
            for (name, tensor) in [("q", &tap.q), ("k", &tap.k), ("v", &tap.v)] {
                c.push(format!("{stream}/{t}/{b}/{name}"), tensor.cast());
            }
        }
        c
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let c = c.expect_tag("FEAT")?;
        let n_styles = c.meta["n_styles"]
            .as_u64()
            .ok_or_else(|| Error::Format("FEAT container lacks n_styles".into()))? as usize;
        let mut cache = FeatureCache::new(n_styles);
        let mut pending: BTreeMap<(Stream, usize, usize), [Option<Tensor<E>>; 3]> = BTreeMap::new();
        for (name, t) in c.tensors {
            let parts: Vec<&str> = name.split('/').collect();
            let parsed = match parts.as_slice() {
                [s, t, b, which] => Stream::parse(s)
                    .zip(t.parse::<usize>().ok())
                    .zip(b.parse::<usize>().ok())
                    .map(|((s, t), b)| ((s, t, b), *which)),
                _ => None,
            };
            let (key, which) = parsed.ok_or_else(|| Error::Format(format!("bad FEAT tensor name `{name}`")))?;
            let slot = match which {
                "q" => 0,
                "k" => 1,
                "v" => 2,
                _ => return Err(Error::Format(format!("bad FEAT tensor name `{name}`"))),
            };
            pending.entry(key).or_default()[slot] = Some(t.cast());
        }
        for ((stream, timestep, block), [q, k, v]) in pending {
            let (Some(q), Some(k), Some(v)) = (q, k, v) else {
                return Err(Error::Format(format!("incomplete tap {stream}/{timestep}/{block}")));
            };
            cache.insert(AttentionTap {
                block,
                timestep,
                stream,
                q,
                k,
                v,
            })?;
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn single_key_broadcasts_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor::<f64>::randn(&[2, 5, 3], &mut rng);
        let k = Tensor::<f64>::randn(&[2, 1, 3], &mut rng);
        let v = Tensor::<f64>::randn(&[2, 1, 3], &mut rng);
        let out = attention(&q, &k, &v, 1.0).unwrap();
        for h in 0..2 {
            for i in 0..5 {
                for c in 0..3 {
                    assert!((out.at(&[h, i, c]) - v.at(&[h, 0, c])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_query_averages_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::<f64>::zeros(&[1, 3, 2]);
        let k = Tensor::<f64>::randn(&[1, 4, 2], &mut rng);
        let v = Tensor::<f64>::randn(&[1, 4, 2], &mut rng);
        let out = attention(&q, &k, &v, 1.5).unwrap();
        for c in 0..2 {
            let mean = (0..4).map(|j| v.at(&[0, j, c])).sum::<f64>() / 4.0;
            for i in 0..3 {
                assert!((out.at(&[0, i, c]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_attention_closed_form() {
        // softmax([10, 0]) · [1, 3] = 1 + 2/(1+e^10)
        let out = attention(&t(&[1, 1, 1], &[10.]), &t(&[1, 2, 1], &[1., 0.]), &t(&[1, 2, 1], &[1., 3.]), 1.0).unwrap();
        let expected = 1.0 + 2.0 / (1.0 + 10f64.exp());
        assert!((out.data()[0] - expected).abs() < 1e-12);
        assert!((out.data()[0] - 1.0000908).abs() < 1e-7);
    }

    #[test]
    fn attention_rejects_mismatched_heads() {
        let q = Tensor::<f64>::zeros(&[2, 3, 4]);
        let k = Tensor::<f64>::zeros(&[1, 3, 4]);
        assert!(attention(&q, &k, &k, 1.0).is_err());
        assert!(attention(&q, &q, &q, 0.0).is_err());
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let qc = t(&[1], &[2.]);
        let qo = t(&[1], &[4.]);
        assert_eq!(blend_queries(&qc, &qo, 1.0).unwrap(), qc);
        assert_eq!(blend_queries(&qc, &qo, 0.0).unwrap(), qo);
        assert_eq!(blend_queries(&qc, &qo, 0.5).unwrap().data(), &[3.]);
        assert!(blend_queries(&qc, &qo, 1.5).is_err());
    }

    fn channel_stats(d: &[f64]) -> (f64, f64) {
        let n = d.len() as f64;
        let m = d.iter().sum::<f64>() / n;
        (m, (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
    }

    // The ε guard perturbs each value by about ε·|z| where z is its
    // standardized magnitude, so identities are checked per unit of |z|.
    fn assert_close_per_z(a: &[f64], b: &[f64], reference: &[f64], scale: f64) {
        let (m, s) = channel_stats(reference);
        for ((a, b), r) in a.iter().zip(b).zip(reference) {
            let z = ((r - m) / s).abs().max(1.0);
            assert!((a - b).abs() <= 1e-5 * z * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn adain_examples() {
        let x = t(&[1, 3], &[1., 2., 3.]);
        let y = t(&[1, 3], &[10., 20., 30.]);
        let out = adain(&x, &y).unwrap();
        // Population std ratio is exactly 10 and the mean maps 2 → 20.
        for (o, e) in out.data().iter().zip([10., 20., 30.]) {
            assert!((o - e).abs() < 1e-3, "{o} vs {e}");
        }
        let same = adain(&x, &x).unwrap();
        assert_close_per_z(same.data(), x.data(), x.data(), 1.0);
        let pair = t(&[1, 2], &[-1., 3.]);
        for (a, b) in adain(&pair, &pair).unwrap().data().iter().zip(pair.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let flat = adain(&t(&[1, 3], &[5., 5., 5.]), &y).unwrap();
        assert!(flat.data().iter().all(|v| (v - 20.0).abs() < 1e-9));
    }

    #[test]
    fn adain_matches_target_stats_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[3, 8, 8], &mut rng);
        let y = Tensor::<f64>::randn(&[3, 8, 8], &mut rng).map(|v| 3.0 * v + 1.0).unwrap();
        let once = adain(&x, &y).unwrap();
        let twice = adain(&once, &y).unwrap();
        for ch in 0..3 {
            let r = ch * 64..(ch + 1) * 64;
            let (o, yy, xx) = (&once.data()[r.clone()], &y.data()[r.clone()], &x.data()[r.clone()]);
            let ((mo, so), (my, sy)) = (channel_stats(o), channel_stats(yy));
            assert!((mo - my).abs() < 1e-4);
            assert!((so - sy).abs() < 1e-4 * sy.max(1.0));
            let ratio = (sy / channel_stats(xx).1).max(1.0);
            assert_close_per_z(&twice.data()[r.clone()], o, o, ratio);
        }
    }

    #[test]
    fn concat_lengths_and_order() {
        let mk = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            AttentionTap {
                block: 0,
                timestep: 1,
                stream: Stream::Style(seed as usize),
                q: Tensor::<f64>::randn(&[2, 16, 4], &mut rng),
                k: Tensor::<f64>::randn(&[2, 16, 4], &mut rng),
                v: Tensor::<f64>::randn(&[2, 16, 4], &mut rng),
            }
        };
        let taps = [mk(0), mk(1), mk(2)];
        let (k, v) = concat_style_features(&[&taps[0], &taps[1], &taps[2]]).unwrap();
        assert_eq!(k.shape(), &[2, 48, 4]);
        assert_eq!(v.at(&[1, 17, 2]), taps[1].v.at(&[1, 1, 2]));
        let (k1, v1) = concat_style_features(&[&taps[0]]).unwrap();
        assert_eq!((k1, v1), (taps[0].k.clone(), taps[0].v.clone()));
    }

    #[test]
    fn cache_rejects_mismatched_style_shapes() {
        let tap = |stream, s| AttentionTap {
            block: 3,
            timestep: 2,
            stream,
            q: Tensor::<f32>::zeros(&[1, s, 2]),
            k: Tensor::zeros(&[1, s, 2]),
            v: Tensor::zeros(&[1, s, 2]),
        };
        let mut cache = FeatureCache::new(2);
        cache.insert(tap(Stream::Style(0), 4)).unwrap();
        assert!(cache.insert(tap(Stream::Style(1), 5)).is_err());
        assert!(cache.insert(tap(Stream::Style(2), 4)).is_err());
        cache.insert(tap(Stream::Style(1), 4)).unwrap();
        cache.insert(tap(Stream::Content, 4)).unwrap();
        assert!(cache.is_complete(&[2], &[3], &[Stream::Content, Stream::Style(0), Stream::Style(1)]));
        let back = FeatureCache::<f32>::from_container(Container::from_bytes(&cache.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, cache);
    }
}
