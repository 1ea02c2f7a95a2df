//! Class-conditional sequence generators.
//!
//! Each toxic class owns one small LSTM language model. A noise vector `z`
//! realizes the latent draw as the initial hidden state, the begin token
//! primes the first step, and sampling proceeds token by token from the full
//! softmax until the learned end token appears or `max_len` is reached. The
//! full-distribution sampling matters: every sequence keeps a nonzero
//! probability, which the policy-gradient convergence argument relies on.
//!
//! All gradients are computed by hand with backpropagation through time. One
//! routine accumulates scaled gradients of `log P(seq | z)`; maximum
//! likelihood pretraining and the policy-gradient update are both thin
//! wrappers around it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, Vocabulary, BEGIN_TOKEN, END_TOKEN, RESERVED_TOKENS};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Token embedding width fed into the LSTM cell.
    pub embed_dim: usize,
    /// LSTM hidden size; also the dimension of the noise vector.
    pub hidden: usize,
    /// Hard cap on generated sequence length.
    pub max_len: usize,
    /// When true the output layer includes a learned end token and sequences
    /// may stop early. Enumerable diagnostic instances disable it so that the
    /// sequence space is exactly `vocab ^ max_len`.
    pub use_end_token: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        // Desk-scale defaults; full-scale runs raise hidden to the hundreds
        // or low thousands.
        GeneratorConfig { embed_dim: 32, hidden: 64, max_len: 20, use_end_token: true }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("generator dims must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("generator max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Latent draw conditioning one generated sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NoiseVector {
    values: Vec<f64>,
}

impl NoiseVector {
    /// Standard normal draw of the given dimension.
    pub fn standard<R: Rng>(rng: &mut R, dim: usize) -> Self {
        NoiseVector { values: (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() }
    }

    /// The zero vector; maximum-likelihood pretraining conditions on it so
    /// that data likelihoods are deterministic.
    pub fn zero(dim: usize) -> Self {
        NoiseVector { values: vec![0.0; dim] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// One sampled sequence together with everything needed to reproduce its
/// probability: the noise vector it was conditioned on and the per-step log
/// probabilities (including the end-token draw when sampling stopped early).
#[derive(Clone, Debug)]
pub struct GenerationSample {
    pub seq: TokenSequence,
    pub noise: NoiseVector,
    pub step_logprobs: Vec<f64>,
    pub total_logprob: f64,
}

// ---------------------------------------------------------------------------
// Parameters

/// LSTM generator for one toxic class. Parameter layout (row-major):
/// `embed` (vocab_total x E), `w_x` (4H x E), `w_h` (4H x H), `b` (4H),
/// `w_out` (out_dim x H), `b_out` (out_dim). Gate order in the 4H blocks is
/// input, forget, candidate, output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorState {
    pub class_id: u32,
    vocab_total: usize,
    content_count: usize,
    embed_dim: usize,
    hidden: usize,
    max_len: usize,
    use_end_token: bool,
    embed: Vec<f64>,
    w_x: Vec<f64>,
    w_h: Vec<f64>,
    b: Vec<f64>,
    w_out: Vec<f64>,
    b_out: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// acc += M x, with M stored row-major as rows x cols.
fn matvec_add(acc: &mut [f64], m: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, a) in acc.iter_mut().enumerate() {
        let row = &m[r * cols..(r + 1) * cols];
        let mut s = 0.0;
        for (w, xi) in row.iter().zip(x) {
            s += w * xi;
        }
        *a += s;
    }
}

/// acc += M^T x, with M stored row-major as x.len() rows by acc.len() cols.
fn matvec_t_add(acc: &mut [f64], m: &[f64], x: &[f64]) {
    let cols = acc.len();
    for (r, xi) in x.iter().enumerate() {
        if *xi == 0.0 {
            continue;
        }
        let row = &m[r * cols..(r + 1) * cols];
        for (a, w) in acc.iter_mut().zip(row) {
            *a += w * xi;
        }
    }
}

/// m[r][c] += u[r] * v[c]
fn outer_add(m: &mut [f64], u: &[f64], v: &[f64]) {
    let cols = v.len();
    for (r, ur) in u.iter().enumerate() {
        if *ur == 0.0 {
            continue;
        }
        let row = &mut m[r * cols..(r + 1) * cols];
        for (a, vc) in row.iter_mut().zip(v) {
            *a += ur * vc;
        }
    }
}

struct StepState {
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    tc: Vec<f64>,
    h: Vec<f64>,
    probs: Vec<f64>,
}

impl GeneratorState {
    pub fn new(class_id: u32, vocab: &Vocabulary, cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vocab.word_count() == 0 {
            return Err(Error::Config("generator needs a non-empty vocabulary".into()));
        }
        let vocab_total = vocab.total_size();
        let content_count = vocab.word_count();
        let out_dim = content_count + usize::from(cfg.use_end_token);
        let (e, h) = (cfg.embed_dim, cfg.hidden);

        let mut rng = crate::rng::rng_from(seed, &[crate::rng::stream::MODEL_INIT, class_id as u64]);
        let mut uniform = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-0.08..0.08)).collect()
        };
        let embed = uniform(vocab_total * e);
        let w_x = uniform(4 * h * e);
        let w_h = uniform(4 * h * h);
        // Forget-gate bias starts positive so early training keeps context;
        // the output layer starts at zero so the initial distribution is
        // exactly uniform, which the enumeration diagnostics rely on.
        let mut b = vec![0.0; 4 * h];
        b[h..2 * h].fill(1.0);
        let w_out = vec![0.0; out_dim * h];
        let b_out = vec![0.0; out_dim];

        Ok(GeneratorState {
            class_id,
            vocab_total,
            content_count,
            embed_dim: e,
            hidden: h,
            max_len: cfg.max_len,
            use_end_token: cfg.use_end_token,
            embed,
            w_x,
            w_h,
            b,
            w_out,
            b_out,
        })
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn use_end_token(&self) -> bool {
        self.use_end_token
    }

    pub fn vocab_total(&self) -> usize {
        self.vocab_total
    }

    pub fn content_count(&self) -> usize {
        self.content_count
    }

    /// Output layer width: content words plus the end token when enabled.
    pub fn out_dim(&self) -> usize {
        self.content_count + usize::from(self.use_end_token)
    }

    /// Output index of the end token, when the generator has one.
    pub fn end_output(&self) -> Option<usize> {
        self.use_end_token.then_some(self.content_count)
    }

    /// Token id emitted by output index `idx`.
    pub fn output_token(&self, idx: usize) -> u32 {
        if idx < self.content_count {
            RESERVED_TOKENS + idx as u32
        } else {
            END_TOKEN
        }
    }

    /// Output index of a content token id; `None` for anything the generator
    /// cannot emit (reserved ids, out-of-range ids).
    pub fn output_index(&self, token: u32) -> Option<usize> {
        if token < RESERVED_TOKENS {
            return None;
        }
        let idx = (token - RESERVED_TOKENS) as usize;
        (idx < self.content_count).then_some(idx)
    }

    fn check_noise(&self, z: &NoiseVector) -> Result<()> {
        if z.dim() != self.hidden {
            return Err(Error::Domain(format!(
                "noise dimension {} does not match hidden size {}",
                z.dim(),
                self.hidden
            )));
        }
        Ok(())
    }

    /// One LSTM step. `mask_end` removes the end token from the distribution
    /// (applied at the first step so generated sequences are never empty).
    fn step(&self, input: u32, h_prev: &[f64], c_prev: &[f64], mask_end: bool) -> StepState {
        let h = self.hidden;
        let x = &self.embed[input as usize * self.embed_dim..(input as usize + 1) * self.embed_dim];

        let mut a = self.b.clone();
        matvec_add(&mut a, &self.w_x, x);
        matvec_add(&mut a, &self.w_h, h_prev);

        let mut i = vec![0.0; h];
        let mut f = vec![0.0; h];
        let mut g = vec![0.0; h];
        let mut o = vec![0.0; h];
        for j in 0..h {
            i[j] = sigmoid(a[j]);
            f[j] = sigmoid(a[h + j]);
            g[j] = a[2 * h + j].tanh();
            o[j] = sigmoid(a[3 * h + j]);
        }
        let mut c = vec![0.0; h];
        let mut tc = vec![0.0; h];
        let mut hh = vec![0.0; h];
        for j in 0..h {
            c[j] = f[j] * c_prev[j] + i[j] * g[j];
            tc[j] = c[j].tanh();
            hh[j] = o[j] * tc[j];
        }

        let mut logits = self.b_out.clone();
        matvec_add(&mut logits, &self.w_out, &hh);
        let probs = self.masked_softmax(&logits, mask_end);

        StepState { i, f, g, o, c, tc, h: hh, probs }
    }

    /// Softmax over output indices; masked entries get exact probability 0.
    /// The result is a probability simplex over the allowed outputs.
    fn masked_softmax(&self, logits: &[f64], mask_end: bool) -> Vec<f64> {
        let masked = |idx: usize| mask_end && Some(idx) == self.end_output();
        let mut max = f64::NEG_INFINITY;
        for (idx, &l) in logits.iter().enumerate() {
            if !masked(idx) && l > max {
                max = l;
            }
        }
        let mut probs = vec![0.0; logits.len()];
        let mut sum = 0.0;
        for (idx, &l) in logits.iter().enumerate() {
            if !masked(idx) {
                let e = (l - max).exp();
                probs[idx] = e;
                sum += e;
            }
        }
        for p in &mut probs {
            *p /= sum;
        }
        probs
    }

    /// Draws one sequence from the generator's full output distribution.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<GenerationSample> {
        let noise = NoiseVector::standard(rng, self.hidden);
        let mut h = noise.values().to_vec();
        let mut c = vec![0.0; self.hidden];
        let mut input = BEGIN_TOKEN;
        let mut tokens = Vec::new();
        let mut step_logprobs = Vec::new();

        for t in 0..self.max_len {
            let mask_end = self.use_end_token && t == 0;
            let step = self.step(input, &h, &c, mask_end);
            let idx = draw_categorical(&step.probs, rng.random::<f64>());
            step_logprobs.push(step.probs[idx].ln());
            if Some(idx) == self.end_output() {
                break;
            }
            let token = self.output_token(idx);
            tokens.push(token);
            h = step.h;
            c = step.c;
            input = token;
        }

        let total_logprob = step_logprobs.iter().sum();
        Ok(GenerationSample {
            seq: TokenSequence::new(tokens).expect("first-step mask guarantees a token"),
            noise,
            step_logprobs,
            total_logprob,
        })
    }

    /// Prediction steps for a sequence: one per token, plus the end-token
    /// step when the sequence stops before `max_len`.
    fn plan_targets(&self, seq: &TokenSequence) -> Result<Vec<usize>> {
        let ids = seq.ids();
        if ids.len() > self.max_len {
            return Err(Error::State(format!(
                "sequence of length {} exceeds max_len {}",
                ids.len(),
                self.max_len
            )));
        }
        let mut targets = Vec::with_capacity(ids.len() + 1);
        for &token in ids {
            targets.push(self.output_index(token).ok_or_else(|| {
                Error::State(format!("token id {token} is not generatable by this model"))
            })?);
        }
        if ids.len() < self.max_len {
            match self.end_output() {
                Some(end) => targets.push(end),
                None => {
                    return Err(Error::State(format!(
                        "sequence of length {} is shorter than max_len {} but the generator \
                         has no end token",
                        ids.len(),
                        self.max_len
                    )))
                }
            }
        }
        Ok(targets)
    }

    /// Input token for prediction step `t` of `seq`.
    fn input_at(seq: &TokenSequence, t: usize) -> u32 {
        if t == 0 {
            BEGIN_TOKEN
        } else {
            seq.ids()[t - 1]
        }
    }

    /// Exact log probability of generating `seq` from noise `z`.
    pub fn log_prob(&self, z: &NoiseVector, seq: &TokenSequence) -> Result<f64> {
        self.check_noise(z)?;
        let targets = self.plan_targets(seq)?;
        let mut h = z.values().to_vec();
        let mut c = vec![0.0; self.hidden];
        let mut logp = 0.0;
        for (t, &target) in targets.iter().enumerate() {
            let mask_end = self.use_end_token && t == 0;
            let step = self.step(Self::input_at(seq, t), &h, &c, mask_end);
            logp += step.probs[target].ln();
            h = step.h;
            c = step.c;
        }
        Ok(logp)
    }

    /// Adds `scale * d log P(seq | z) / d theta` into `grads` and returns
    /// `log P(seq | z)`. Backpropagation through time over the cached forward
    /// states.
    pub fn accumulate_grad(
        &self,
        z: &NoiseVector,
        seq: &TokenSequence,
        scale: f64,
        grads: &mut GeneratorGrads,
    ) -> Result<f64> {
        self.check_noise(z)?;
        grads.check_shape(self)?;
        let targets = self.plan_targets(seq)?;
        let hdim = self.hidden;

        // Forward with cache.
        let zero_c = vec![0.0; hdim];
        let mut cache: Vec<StepState> = Vec::with_capacity(targets.len());
        let mut logp = 0.0;
        for (t, &target) in targets.iter().enumerate() {
            let (h_prev, c_prev) = if t == 0 {
                (z.values(), zero_c.as_slice())
            } else {
                (&cache[t - 1].h[..], &cache[t - 1].c[..])
            };
            let mask_end = self.use_end_token && t == 0;
            let step = self.step(Self::input_at(seq, t), h_prev, c_prev, mask_end);
            logp += step.probs[target].ln();
            cache.push(step);
        }

        if scale == 0.0 {
            return Ok(logp);
        }

        // Backward through time.
        let mut dh_next = vec![0.0; hdim];
        let mut dc_next = vec![0.0; hdim];
        for t in (0..targets.len()).rev() {
            let step = &cache[t];
            // d(scale * log softmax[target]) / d logits = scale * (onehot - p).
            // Masked outputs have p = 0 and are never the target, so the
            // formula covers them with a zero gradient.
            let mut dlogits = step.probs.clone();
            for d in dlogits.iter_mut() {
                *d = -scale * *d;
            }
            dlogits[targets[t]] += scale;

            outer_add(&mut grads.w_out, &dlogits, &step.h);
            for (a, d) in grads.b_out.iter_mut().zip(&dlogits) {
                *a += d;
            }
            let mut dh = dh_next;
            matvec_t_add(&mut dh, &self.w_out, &dlogits);

            let c_prev_owned;
            let (h_prev, c_prev): (&[f64], &[f64]) = if t == 0 {
                c_prev_owned = vec![0.0; hdim];
                (z.values(), &c_prev_owned)
            } else {
                (&cache[t - 1].h, &cache[t - 1].c)
            };

            let mut da = vec![0.0; 4 * hdim];
            let mut dc = dc_next;
            let mut dc_prev = vec![0.0; hdim];
            for j in 0..hdim {
                let do_ = dh[j] * step.tc[j];
                dc[j] += dh[j] * step.o[j] * (1.0 - step.tc[j] * step.tc[j]);
                let di = dc[j] * step.g[j];
                let dg = dc[j] * step.i[j];
                let df = dc[j] * c_prev[j];
                dc_prev[j] = dc[j] * step.f[j];
                da[j] = di * step.i[j] * (1.0 - step.i[j]);
                da[hdim + j] = df * step.f[j] * (1.0 - step.f[j]);
                da[2 * hdim + j] = dg * (1.0 - step.g[j] * step.g[j]);
                da[3 * hdim + j] = do_ * step.o[j] * (1.0 - step.o[j]);
            }

            let input = Self::input_at(seq, t) as usize;
            let x = &self.embed[input * self.embed_dim..(input + 1) * self.embed_dim];
            outer_add(&mut grads.w_x, &da, x);
            outer_add(&mut grads.w_h, &da, h_prev);
            for (a, d) in grads.b.iter_mut().zip(&da) {
                *a += d;
            }
            let dx = &mut grads.embed[input * self.embed_dim..(input + 1) * self.embed_dim];
            matvec_t_add(dx, &self.w_x, &da);

            let mut dh_prev = vec![0.0; hdim];
            matvec_t_add(&mut dh_prev, &self.w_h, &da);
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        Ok(logp)
    }

    /// `log P(seq | z)` together with its full parameter gradient.
    pub fn log_prob_with_grad(
        &self,
        z: &NoiseVector,
        seq: &TokenSequence,
    ) -> Result<(f64, GeneratorGrads)> {
        let mut grads = GeneratorGrads::zeros_like(self);
        let logp = self.accumulate_grad(z, seq, 1.0, &mut grads)?;
        Ok((logp, grads))
    }

    /// Mean negative log likelihood per prediction step, conditioned on the
    /// zero noise vector.
    pub fn mean_nll(&self, data: &[TokenSequence]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Domain("mean NLL over an empty dataset".into()));
        }
        let z = NoiseVector::zero(self.hidden);
        let mut total = 0.0;
        let mut terms = 0usize;
        for seq in data {
            total -= self.log_prob(&z, seq)?;
            terms += self.plan_targets(seq)?.len();
        }
        Ok(total / terms as f64)
    }

    fn param_arrays(&self) -> [(&'static str, &Vec<f64>); 6] {
        [
            ("embed", &self.embed),
            ("w_x", &self.w_x),
            ("w_h", &self.w_h),
            ("b", &self.b),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    fn param_arrays_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.embed,
            &mut self.w_x,
            &mut self.w_h,
            &mut self.b,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.param_arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// Reads parameter `idx` in flat order (embed, w_x, w_h, b, w_out, b_out).
    pub fn get_param(&self, idx: usize) -> f64 {
        let mut i = idx;
        for (_, a) in self.param_arrays() {
            if i < a.len() {
                return a[i];
            }
            i -= a.len();
        }
        panic!("parameter index {idx} out of range");
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let mut i = idx;
        for a in self.param_arrays_mut() {
            if i < a.len() {
                a[i] = value;
                return;
            }
            i -= a.len();
        }
        panic!("parameter index {idx} out of range");
    }

    /// Checks internal consistency after deserialization.
    pub fn validate_shapes(&self) -> Result<()> {
        let (e, h, v) = (self.embed_dim, self.hidden, self.vocab_total);
        let out = self.out_dim();
        let checks = [
            ("embed", self.embed.len(), v * e),
            ("w_x", self.w_x.len(), 4 * h * e),
            ("w_h", self.w_h.len(), 4 * h * h),
            ("b", self.b.len(), 4 * h),
            ("w_out", self.w_out.len(), out * h),
            ("b_out", self.b_out.len(), out),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Checkpoint(format!(
                    "generator array {name} has {got} values, expected {want}"
                )));
            }
        }
        if self.content_count == 0
            || self.content_count + RESERVED_TOKENS as usize != self.vocab_total
        {
            return Err(Error::Checkpoint(format!(
                "generator token layout is inconsistent: {} content tokens in a vocabulary of {}",
                self.content_count, self.vocab_total
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Checkpoint("generator max_len is zero".into()));
        }
        for (name, a) in self.param_arrays() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("non-finite value in generator array {name}")));
            }
        }
        Ok(())
    }
}

/// Inverse-CDF draw from a categorical distribution. `u` is uniform in
/// [0, 1); floating-point shortfall at the top end falls back to the last
/// positive-probability entry.
fn draw_categorical(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (idx, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = idx;
            cum += p;
            if u < cum {
                return idx;
            }
        }
    }
    last_positive
}

// ---------------------------------------------------------------------------
// Gradients

/// Gradient accumulator shaped like a [`GeneratorState`].
#[derive(Clone, Debug)]
pub struct GeneratorGrads {
    embed: Vec<f64>,
    w_x: Vec<f64>,
    w_h: Vec<f64>,
    b: Vec<f64>,
    w_out: Vec<f64>,
    b_out: Vec<f64>,
}

impl GeneratorGrads {
    pub fn zeros_like(g: &GeneratorState) -> Self {
        GeneratorGrads {
            embed: vec![0.0; g.embed.len()],
            w_x: vec![0.0; g.w_x.len()],
            w_h: vec![0.0; g.w_h.len()],
            b: vec![0.0; g.b.len()],
            w_out: vec![0.0; g.w_out.len()],
            b_out: vec![0.0; g.b_out.len()],
        }
    }

    fn check_shape(&self, g: &GeneratorState) -> Result<()> {
        if self.embed.len() != g.embed.len()
            || self.w_x.len() != g.w_x.len()
            || self.w_h.len() != g.w_h.len()
            || self.b.len() != g.b.len()
            || self.w_out.len() != g.w_out.len()
            || self.b_out.len() != g.b_out.len()
        {
            return Err(Error::Domain("gradient shape does not match generator".into()));
        }
        Ok(())
    }

    fn arrays(&self) -> [&Vec<f64>; 6] {
        [&self.embed, &self.w_x, &self.w_h, &self.b, &self.w_out, &self.b_out]
    }

    fn arrays_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [&mut self.embed, &mut self.w_x, &mut self.w_h, &mut self.b, &mut self.w_out, &mut self.b_out]
    }

    /// Flattened copy in the generator's parameter order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for a in self.arrays() {
            out.extend_from_slice(a);
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.arrays_mut() {
            for v in a.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn add(&mut self, other: &GeneratorGrads) {
        for (a, b) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.arrays().iter().map(|a| a.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }
}

impl GeneratorState {
    /// theta += lr * grads. Callers pick the sign by how they filled `grads`.
    pub fn apply_step(&mut self, grads: &GeneratorGrads, lr: f64) -> Result<()> {
        grads.check_shape(self)?;
        for (param, grad) in self.param_arrays_mut().into_iter().zip(grads.arrays()) {
            for (p, g) in param.iter_mut().zip(grad) {
                *p += lr * g;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, Default)]
pub struct MleReport {
    /// Mean NLL per prediction step, measured on each epoch's batches before
    /// their updates (the usual online training loss).
    pub epoch_nll: Vec<f64>,
}

/// Teacher-forced maximum-likelihood pretraining with minibatch SGD. The
/// gradient is normalized per prediction step, so the learning rate is
/// insensitive to sequence length. A `batch_size` covering the whole dataset
/// makes the routine fully deterministic (no shuffling).
pub fn mle_pretrain<R: Rng>(
    g: &mut GeneratorState,
    data: &[TokenSequence],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<MleReport> {
    if data.is_empty() {
        return Err(Error::Domain("MLE pretraining over an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("MLE batch_size must be positive".into()));
    }
    let z = NoiseVector::zero(g.hidden);
    let mut report = MleReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for _ in 0..epochs {
        if batch_size < data.len() {
            use rand::seq::SliceRandom;
            order.shuffle(rng);
        }
        let mut epoch_nll_sum = 0.0;
        let mut epoch_terms = 0usize;
        for chunk in order.chunks(batch_size) {
            let mut grads = GeneratorGrads::zeros_like(g);
            let mut terms = 0usize;
            let mut nll = 0.0;
            for &idx in chunk {
                let seq = &data[idx];
                nll -= g.accumulate_grad(&z, seq, 1.0, &mut grads)?;
                terms += g.plan_targets(seq)?.len();
            }
            epoch_nll_sum += nll;
            epoch_terms += terms;
            // Ascent on mean log-likelihood per step.
            g.apply_step(&grads, lr / terms as f64)?;
        }
        report.epoch_nll.push(epoch_nll_sum / epoch_terms as f64);
    }
    Ok(report)
}

/// Policy-gradient update. `batch` pairs each sampled sequence with a reward
/// in [0, 1]; this is the seam where the bounded-reward contract is enforced.
/// The parameters move one step of gradient ascent on the Monte-Carlo
/// estimate of `E[R]`, i.e. descent on the policy-gradient loss, and the
/// returned value is the Euclidean norm of that gradient estimate.
pub fn reinforce_update(
    g: &mut GeneratorState,
    batch: &[(GenerationSample, f64)],
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("policy-gradient update over an empty batch".into()));
    }
    for (_, reward) in batch {
        if !reward.is_finite() || !(0.0..=1.0).contains(reward) {
            return Err(Error::Domain(format!("reward {reward} outside [0, 1]")));
        }
    }
    let n = batch.len() as f64;
    let mut grads = GeneratorGrads::zeros_like(g);
    for (sample, reward) in batch {
        if *reward == 0.0 {
            continue;
        }
        g.accumulate_grad(&sample.noise, &sample.seq, reward / n, &mut grads)?;
    }
    let norm = grads.norm();
    g.apply_step(&grads, lr)?;
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;
    use crate::rng::rng_from;

    fn vocab_of(n: usize) -> Vocabulary {
        Vocabulary::from_words((0..n).map(|i| format!("w{i}"))).unwrap()
    }

    fn tiny_generator(content: usize, cfg: GeneratorConfig) -> GeneratorState {
        GeneratorState::new(1, &vocab_of(content), &cfg, 42).unwrap()
    }

    /// Random-ish nonzero parameters; `new` zeroes the output layer, which
    /// would leave parts of the gradient trivially zero.
    fn randomize(g: &mut GeneratorState, seed: u64) {
        let mut rng = rng_from(seed, &[99]);
        use rand::Rng;
        for i in 0..g.param_count() {
            g.set_param(i, rng.random_range(-0.5..0.5));
        }
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::new(ids.to_vec()).unwrap()
    }

    /// All sequences the generator can emit, as token vectors. With an end
    /// token every length in `1..=max_len` is reachable; without one only
    /// full-length sequences exist.
    fn enumerate_sequences(g: &GeneratorState) -> Vec<Vec<u32>> {
        let content: Vec<u32> = (0..g.content_count() as u32).map(|i| RESERVED_TOKENS + i).collect();
        let min_len = if g.use_end_token() { 1 } else { g.max_len() };
        let mut out = Vec::new();
        let mut frontier: Vec<Vec<u32>> = content.iter().map(|&t| vec![t]).collect();
        while let Some(prefix) = frontier.pop() {
            if prefix.len() >= min_len {
                out.push(prefix.clone());
            }
            if prefix.len() < g.max_len() {
                for &t in &content {
                    let mut next = prefix.clone();
                    next.push(t);
                    frontier.push(next);
                }
            }
        }
        out
    }

    #[test]
    fn sequence_probabilities_sum_to_one_with_end_token() {
        let cfg = GeneratorConfig { embed_dim: 3, hidden: 4, max_len: 3, use_end_token: true };
        let mut g = tiny_generator(5, cfg);
        randomize(&mut g, 7);
        let z = NoiseVector::standard(&mut rng_from(1, &[2]), g.hidden());
        let mut total = 0.0;
        let mut count = 0;
        for ids in enumerate_sequences(&g) {
            total += g.log_prob(&z, &seq(&ids)).unwrap().exp();
            count += 1;
        }
        assert_eq!(count, 5 + 25 + 125);
        assert!((total - 1.0).abs() < 1e-6, "total probability {total}");
    }

    #[test]
    fn sequence_probabilities_sum_to_one_without_end_token() {
        let cfg = GeneratorConfig { embed_dim: 3, hidden: 4, max_len: 2, use_end_token: false };
        let mut g = tiny_generator(3, cfg);
        randomize(&mut g, 8);
        let z = NoiseVector::standard(&mut rng_from(3, &[4]), g.hidden());
        let total: f64 = enumerate_sequences(&g)
            .into_iter()
            .map(|ids| g.log_prob(&z, &seq(&ids)).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9, "total probability {total}");
        // Shorter sequences are outside the model's space.
        assert!(g.log_prob(&z, &seq(&[RESERVED_TOKENS])).is_err());
    }

    #[test]
    fn sampled_logprob_matches_teacher_forcing() {
        let cfg = GeneratorConfig { embed_dim: 4, hidden: 6, max_len: 5, use_end_token: true };
        let mut g = tiny_generator(6, cfg);
        randomize(&mut g, 9);
        let mut rng = rng_from(10, &[11]);
        for _ in 0..50 {
            let sample = g.sample(&mut rng).unwrap();
            let sum: f64 = sample.step_logprobs.iter().sum();
            assert!((sample.total_logprob - sum).abs() < 1e-9);
            let lp = g.log_prob(&sample.noise, &sample.seq).unwrap();
            assert!(
                (lp - sample.total_logprob).abs() < 1e-9,
                "teacher-forced {lp} vs sampled {}",
                sample.total_logprob
            );
            assert!(sample.total_logprob <= 0.0);
            assert!(!sample.seq.ids().is_empty());
            assert!(sample.seq.len() <= g.max_len());
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = GeneratorConfig { embed_dim: 3, hidden: 4, max_len: 3, use_end_token: true };
        let mut g = tiny_generator(4, cfg);
        randomize(&mut g, 12);
        let z = NoiseVector::standard(&mut rng_from(5, &[6]), g.hidden());
        let s = seq(&[RESERVED_TOKENS + 1, RESERVED_TOKENS]);
        let (_, grads) = g.log_prob_with_grad(&z, &s).unwrap();
        let flat = grads.to_flat();

        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..g.param_count() {
            let orig = g.get_param(i);
            g.set_param(i, orig + eps);
            let hi = g.log_prob(&z, &s).unwrap();
            g.set_param(i, orig - eps);
            let lo = g.log_prob(&z, &s).unwrap();
            g.set_param(i, orig);
            let fd = (hi - lo) / (2.0 * eps);
            let denom = fd.abs().max(flat[i].abs()).max(1e-6);
            worst = worst.max((fd - flat[i]).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    /// Best achievable mean NLL per step for a deterministic autoregressive
    /// model (`z = 0`): the empirical conditional entropy over the data's
    /// prefix tree. Branching prefixes make exactly-zero NLL unreachable, so
    /// memorization is measured as distance to this floor.
    fn prefix_tree_nll_floor(data: &[TokenSequence]) -> f64 {
        use std::collections::HashMap;
        const END: u32 = u32::MAX;
        let mut counts: HashMap<Vec<u32>, HashMap<u32, usize>> = HashMap::new();
        for s in data {
            let ids = s.ids();
            for t in 0..=ids.len() {
                let next = if t == ids.len() { END } else { ids[t] };
                *counts.entry(ids[..t].to_vec()).or_default().entry(next).or_default() += 1;
            }
        }
        let mut nll = 0.0;
        let mut terms = 0usize;
        for s in data {
            let ids = s.ids();
            for t in 0..=ids.len() {
                let next = if t == ids.len() { END } else { ids[t] };
                let dist = &counts[&ids[..t].to_vec()];
                let total: usize = dist.values().sum();
                nll -= (dist[&next] as f64 / total as f64).ln();
                terms += 1;
            }
        }
        nll / terms as f64
    }

    #[test]
    fn mle_pretraining_memorizes_a_small_corpus() {
        let vocab = vocab_of(8);
        let cfg = GeneratorConfig { embed_dim: 16, hidden: 32, max_len: 8, use_end_token: true };
        let mut g = GeneratorState::new(1, &vocab, &cfg, 3).unwrap();
        let mut rng = rng_from(20, &[21]);
        let data: Vec<TokenSequence> = (0..20)
            .map(|i| {
                use rand::Rng;
                let len = 3 + (i % 4);
                seq(&(0..len)
                    .map(|_| RESERVED_TOKENS + rng.random_range(0..8))
                    .collect::<Vec<_>>())
            })
            .collect();
        let floor = prefix_tree_nll_floor(&data);
        let report = mle_pretrain(&mut g, &data, 1500, 1.0, data.len(), &mut rng).unwrap();
        let final_nll = g.mean_nll(&data).unwrap();
        assert!(
            final_nll < floor + 0.05,
            "memorization stalled: final NLL/token {final_nll}, floor {floor}, first {:?}, last {:?}",
            report.epoch_nll.first(),
            report.epoch_nll.last()
        );
    }

    #[test]
    fn mle_loss_strictly_decreases_on_a_repeated_sequence() {
        let cfg = GeneratorConfig { embed_dim: 8, hidden: 12, max_len: 6, use_end_token: true };
        let mut g = tiny_generator(5, cfg);
        let data = vec![seq(&[4, 5, 6, 4])];
        let mut rng = rng_from(1, &[1]);
        let report = mle_pretrain(&mut g, &data, 30, 0.5, 1, &mut rng).unwrap();
        for pair in report.epoch_nll.windows(2) {
            assert!(pair[1] < pair[0], "NLL did not strictly decrease: {pair:?}");
        }
    }

    #[test]
    fn mle_zero_lr_and_zero_epochs_are_identity() {
        let cfg = GeneratorConfig { embed_dim: 4, hidden: 5, max_len: 4, use_end_token: true };
        let mut g = tiny_generator(4, cfg);
        randomize(&mut g, 30);
        let before: Vec<f64> = (0..g.param_count()).map(|i| g.get_param(i)).collect();
        let data = vec![seq(&[4, 5])];
        let mut rng = rng_from(2, &[2]);
        mle_pretrain(&mut g, &data, 5, 0.0, 8, &mut rng).unwrap();
        let report = mle_pretrain(&mut g, &data, 0, 0.7, 8, &mut rng).unwrap();
        assert!(report.epoch_nll.is_empty());
        let after: Vec<f64> = (0..g.param_count()).map(|i| g.get_param(i)).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn reinforce_rejects_out_of_range_rewards() {
        let cfg = GeneratorConfig { embed_dim: 4, hidden: 5, max_len: 4, use_end_token: true };
        let mut g = tiny_generator(4, cfg);
        let mut rng = rng_from(3, &[3]);
        let sample = g.sample(&mut rng).unwrap();
        for bad in [-0.0001, 1.0001, f64::NAN, f64::INFINITY] {
            let err = reinforce_update(&mut g, &[(sample.clone(), bad)], 0.1).unwrap_err();
            assert!(matches!(err, Error::Domain(_)), "reward {bad} accepted");
        }
        assert!(reinforce_update(&mut g, &[], 0.1).is_err());
    }

    #[test]
    fn zero_rewards_leave_parameters_untouched() {
        let cfg = GeneratorConfig { embed_dim: 4, hidden: 5, max_len: 4, use_end_token: true };
        let mut g = tiny_generator(4, cfg);
        randomize(&mut g, 31);
        let mut rng = rng_from(4, &[4]);
        let batch: Vec<(GenerationSample, f64)> =
            (0..6).map(|_| (g.sample(&mut rng).unwrap(), 0.0)).collect();
        let before: Vec<f64> = (0..g.param_count()).map(|i| g.get_param(i)).collect();
        let norm = reinforce_update(&mut g, &batch, 0.5).unwrap();
        let after: Vec<f64> = (0..g.param_count()).map(|i| g.get_param(i)).collect();
        assert_eq!(norm, 0.0);
        assert_eq!(before, after);
    }

    #[test]
    fn shape_validation_catches_corruption() {
        let cfg = GeneratorConfig { embed_dim: 4, hidden: 5, max_len: 4, use_end_token: true };
        let mut g = tiny_generator(4, cfg);
        g.validate_shapes().unwrap();
        g.b.pop();
        assert!(matches!(g.validate_shapes(), Err(Error::Checkpoint(_))));
    }
}
