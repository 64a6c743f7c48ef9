//! Unfolded EM network: an encoder maps candidate positions to initial
//! cluster means, a fixed number of differentiable EM iterations refine them
//! against the observed PRPs, and a decoder maps the refined means to
//! speaker positions.

use ndarray::Array3;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::em::{MEAN_DENOMINATOR_FLOOR, OUTLIER_VARIANCE, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::geometry::Position;
use crate::prp::{expected_prp, BinLayout, PRPField};
use crate::room::{ArrayGeometry, RoomSpec};

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use train::{train, validate, write_curves_csv, CandidateSampler, EpochStats, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub activation: Activation,
}

/// Fully connected stack; ReLU on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct FCStack {
    pub layers: Vec<DenseLayer>,
}

impl FCStack {
    /// He-normal weights (scaled by `1/sqrt(in)` for the linear output), zero biases.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<FCStack> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("bad layer sizes {sizes:?}")));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let activation = if i == last { Activation::Linear } else { Activation::Relu };
                let std = match activation {
                    Activation::Relu => (2.0 / fan_in as f64).sqrt(),
                    Activation::Linear => (1.0 / fan_in as f64).sqrt(),
                };
                let weight = (0..fan_in * fan_out).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
                DenseLayer {
                    weight: Tensor::new(vec![fan_out, fan_in], weight).expect("sized"),
                    bias: Tensor::zeros(&[fan_out]),
                    activation,
                }
            })
            .collect();
        Ok(FCStack { layers })
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("empty FC stack".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let s = l.weight.shape();
            if s.len() != 2 || l.bias.shape() != [s[0]] {
                return Err(Error::Shape(format!("layer {i}: weight {s:?}, bias {:?}", l.bias.shape())));
            }
            if i > 0 && self.layers[i - 1].weight.shape()[0] != s[1] {
                return Err(Error::Shape(format!("layer {i} input {} does not chain", s[1])));
            }
            if !l.weight.data().iter().chain(l.bias.data()).all(|v| v.is_finite()) {
                return Err(Error::Domain(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Applies the stack to vector `x`; `params` holds (weight, bias) per layer.
    pub fn apply(&self, g: &Graph, params: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = (params[2 * i], params[2 * i + 1]);
            let n = g.shape(h).iter().product::<usize>();
            let col = g.reshape(h, &[n, 1])?;
            let y = g.matmul(w, col)?;
            let y = g.reshape(y, &[layer.weight.shape()[0]])?;
            h = g.add(y, b)?;
            if layer.activation == Activation::Relu {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub em_depth: usize,
    /// Weight of the cosine term in the loss.
    pub lambda: f64,
    /// Append a zero-mean outlier cluster inside the unrolled layers.
    pub outlier: bool,
    pub pin_outlier_mean: bool,
    /// Store EM states every this many layers and recompute in between
    /// during the backward pass; 0 keeps the whole unroll on one tape.
    pub checkpoint_every: usize,
    /// Back-propagate through only the last this many EM layers.
    pub backprop_depth: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_hidden: vec![256, 512],
            decoder_hidden: vec![512, 256],
            em_depth: 70,
            lambda: 0.25,
            outlier: true,
            pin_outlier_mean: true,
            checkpoint_every: 10,
            backprop_depth: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.pin_outlier_mean && !self.outlier {
            return Err(Error::Config("pin_outlier_mean needs outlier".into()));
        }
        Ok(())
    }
}

/// One training or evaluation item.
#[derive(Debug, Clone)]
pub struct Example {
    pub prp: PRPField,
    pub room: RoomSpec,
    pub array: ArrayGeometry,
    pub sources: Vec<Position>,
}

impl Example {
    /// Expected PRPs of the true sources, `[S, K, M]`.
    pub fn expected_prps(&self) -> Array3<Complex64> {
        stack_expected(&self.sources, &self.array, &self.prp.layout, self.room.speed_of_sound)
    }
}

fn stack_expected(positions: &[Position], array: &ArrayGeometry, layout: &BinLayout, c: f64) -> Array3<Complex64> {
    let mut out = Array3::zeros((positions.len(), layout.num_bins, array.num_pairs()));
    for (s, p) in positions.iter().enumerate() {
        out.slice_mut(ndarray::s![s, .., ..]).assign(&expected_prp(p, array, layout, c));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedModel {
    pub config: ModelConfig,
    pub num_speakers: usize,
    pub layout: BinLayout,
    pub num_pairs: usize,
    pub encoder: FCStack,
    pub decoder: FCStack,
}

/// EM state as graph variables: means `[C,K,M]` (real, imaginary), priors and variances `[C]`.
#[derive(Debug, Clone, Copy)]
pub struct EmState {
    pub mean_re: Var,
    pub mean_im: Var,
    pub psi: Var,
    pub sigma2: Var,
}

impl EmState {
    fn vars(&self) -> [Var; 4] {
        [self.mean_re, self.mean_im, self.psi, self.sigma2]
    }
}

/// Plain values of an [`EmState`], used to cut the tape between segments.
#[derive(Debug, Clone, PartialEq)]
pub struct EmValues {
    pub mean_re: Tensor,
    pub mean_im: Tensor,
    pub psi: Tensor,
    pub sigma2: Tensor,
}

impl EmValues {
    pub fn read(g: &Graph, s: &EmState) -> EmValues {
        EmValues {
            mean_re: g.value(s.mean_re).clone(),
            mean_im: g.value(s.mean_im).clone(),
            psi: g.value(s.psi).clone(),
            sigma2: g.value(s.sigma2).clone(),
        }
    }

    fn bind(&self, g: &Graph, differentiable: bool) -> EmState {
        let leaf = |t: &Tensor| if differentiable { g.param(t.clone()) } else { g.constant(t.clone()) };
        EmState {
            mean_re: leaf(&self.mean_re),
            mean_im: leaf(&self.mean_im),
            psi: leaf(&self.psi),
            sigma2: leaf(&self.sigma2),
        }
    }
}

/// Observed PRPs on a tape. Masked bins carry zero weight.
pub struct ObservedPrp {
    pub phi_re: Var,
    pub phi_im: Var,
    /// `[T, K]`, 1 for valid bins.
    pub mask: Var,
    pub num_valid: usize,
    pub num_pairs: usize,
}

impl ObservedPrp {
    pub fn bind(g: &Graph, prp: &PRPField) -> ObservedPrp {
        let (t, k, m) = prp.phi.dim();
        let phi_re = prp.phi.iter().map(|z| z.re).collect();
        let phi_im = prp.phi.iter().map(|z| z.im).collect();
        let mask = prp.mask.iter().map(|&v| v as u8 as f64).collect();
        ObservedPrp {
            phi_re: g.constant(Tensor::new(vec![t, k, m], phi_re).expect("sized")),
            phi_im: g.constant(Tensor::new(vec![t, k, m], phi_im).expect("sized")),
            mask: g.constant(Tensor::new(vec![t, k], mask).expect("sized")),
            num_valid: prp.num_valid(),
            num_pairs: m,
        }
    }
}

/// One differentiable E-step followed by an M-step.
///
/// Values agree with [`crate::em::e_step`] then [`crate::em::m_step_pinned`]
/// including the floors and the empty-cluster rule.
pub fn em_layer(g: &Graph, obs: &ObservedPrp, state: &EmState, pinned: Option<usize>) -> Result<EmState> {
    if obs.num_valid == 0 {
        return Ok(*state);
    }
    let m = obs.num_pairs as f64;
    let log_prior = g.ln(state.psi);
    let log_norm = g.affine(g.ln(state.sigma2), -m, -m * std::f64::consts::PI.ln());
    let bias = g.add(log_prior, log_norm)?;
    let dist = g.sq_dist_bins(obs.phi_re, obs.phi_im, state.mean_re, state.mean_im)?;
    let scaled = g.div(dist, state.sigma2)?;
    let logits = g.sub(bias, scaled)?;
    let post = g.softmax_last(logits);
    let w = g.mul_prefix(post, obs.mask)?;

    let weight = g.sum_leading(w, 1)?;
    let den = g.bin_sum(w)?;
    let num_re = g.bin_weighted_sum(w, obs.phi_re)?;
    let num_im = g.bin_weighted_sum(w, obs.phi_im)?;
    let fresh_re = g.div_floor_prefix(num_re, den, MEAN_DENOMINATOR_FLOOR)?;
    let fresh_im = g.div_floor_prefix(num_im, den, MEAN_DENOMINATOR_FLOOR)?;
    let update: Vec<bool> = g
        .value(weight)
        .data()
        .iter()
        .enumerate()
        .map(|(c, &n)| n > 0.0 && pinned != Some(c))
        .collect();
    let mean_re = g.select(&update, fresh_re, state.mean_re)?;
    let mean_im = g.select(&update, fresh_im, state.mean_im)?;

    let psi = g.scale(weight, 1.0 / obs.num_valid as f64);
    let dist = g.sq_dist_bins(obs.phi_re, obs.phi_im, mean_re, mean_im)?;
    let residual = g.sum_leading(g.mul(w, dist)?, 1)?;
    let ratio = g.div_floor(residual, g.scale(weight, m), f64::MIN_POSITIVE)?;
    let sigma2 = g.max_floor(ratio, SIGMA_FLOOR);
    Ok(EmState {
        mean_re,
        mean_im,
        psi,
        sigma2,
    })
}

/// Index of the highest-variance cluster; ties go to the highest index.
pub fn outlier_index(sigma2: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in sigma2.iter().enumerate() {
        if v >= sigma2[best] {
            best = i;
        }
    }
    best
}

/// Which bound parameter slots belong to which stack.
struct Bound {
    encoder: Vec<Var>,
    decoder: Vec<Var>,
}

/// Result of a loss evaluation with parameter gradients.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub positions: Vec<Position>,
    /// One buffer per parameter tensor, in [`UnfoldedModel::parameters`] order.
    pub grads: Vec<Vec<f64>>,
}

impl UnfoldedModel {
    pub fn new<R: Rng>(config: ModelConfig, num_speakers: usize, layout: BinLayout, num_pairs: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if num_speakers == 0 || num_pairs == 0 || layout.num_bins == 0 {
            return Err(Error::Config("model needs speakers, pairs and bins".into()));
        }
        let width = 2 * num_speakers * layout.num_bins * num_pairs;
        let mut enc = vec![3 * num_speakers];
        enc.extend(&config.encoder_hidden);
        enc.push(width);
        let mut dec = vec![width];
        dec.extend(&config.decoder_hidden);
        dec.push(3 * num_speakers);
        let encoder = FCStack::new(&enc, rng)?;
        let decoder = FCStack::new(&dec, rng)?;
        Ok(UnfoldedModel {
            config,
            num_speakers,
            layout,
            num_pairs,
            encoder,
            decoder,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        let width = 2 * self.num_speakers * self.layout.num_bins * self.num_pairs;
        if self.encoder.input_size() != 3 * self.num_speakers
            || self.encoder.output_size() != width
            || self.decoder.input_size() != width
            || self.decoder.output_size() != 3 * self.num_speakers
        {
            return Err(Error::Shape("encoder/decoder sizes do not match speakers, bins and pairs".into()));
        }
        Ok(())
    }

    pub fn num_clusters(&self) -> usize {
        self.num_speakers + self.config.outlier as usize
    }

    fn pinned(&self) -> Option<usize> {
        (self.config.outlier && self.config.pin_outlier_mean).then_some(self.num_speakers)
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.encoder.tensors().chain(self.decoder.tensors()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder.tensors_mut().chain(self.decoder.tensors_mut()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    fn check_example(&self, prp: &PRPField, candidates: &[Position]) -> Result<()> {
        if prp.layout != self.layout || prp.num_pairs() != self.num_pairs {
            return Err(Error::Shape(format!(
                "features {:?} with {} pairs; model expects {:?} with {} pairs",
                prp.layout,
                prp.num_pairs(),
                self.layout,
                self.num_pairs
            )));
        }
        if candidates.len() != self.num_speakers {
            return Err(Error::Shape(format!("{} candidates for {} speakers", candidates.len(), self.num_speakers)));
        }
        Ok(())
    }

    fn bind(&self, g: &Graph, differentiable: bool) -> Bound {
        let leaf = |t: &Tensor| if differentiable { g.param(t.clone()) } else { g.constant(t.clone()) };
        Bound {
            encoder: self.encoder.tensors().map(leaf).collect(),
            decoder: self.decoder.tensors().map(leaf).collect(),
        }
    }

    /// Candidate positions (normalized by room size) to initial means `[S,K,M]`.
    pub fn encode(&self, g: &Graph, params: &[Var], room: &RoomSpec, candidates: &[Position]) -> Result<(Var, Var)> {
        let input: Vec<f64> = candidates.iter().flat_map(|p| room.normalize(p)).collect();
        let x = g.constant(Tensor::vector(input));
        let out = self.encoder.apply(g, params, x)?;
        let half = self.num_speakers * self.layout.num_bins * self.num_pairs;
        let shape = [self.num_speakers, self.layout.num_bins, self.num_pairs];
        let re = g.reshape(g.slice(out, 0, half)?, &shape)?;
        let im = g.reshape(g.slice(out, half, half)?, &shape)?;
        Ok((re, im))
    }

    /// Initial EM state: encoded means plus the optional zero-mean outlier,
    /// uniform priors, unit variances (outlier: [`OUTLIER_VARIANCE`]).
    pub fn initial_state(&self, g: &Graph, mean_re: Var, mean_im: Var) -> Result<EmState> {
        let (s, k, m) = (self.num_speakers, self.layout.num_bins, self.num_pairs);
        let c = self.num_clusters();
        let (mean_re, mean_im) = if self.config.outlier {
            let zeros = g.constant(Tensor::zeros(&[k * m]));
            let re = g.concat(&[mean_re, zeros]);
            let im = g.concat(&[mean_im, zeros]);
            (g.reshape(re, &[c, k, m])?, g.reshape(im, &[c, k, m])?)
        } else {
            (mean_re, mean_im)
        };
        let mut sigma2 = vec![1.0; c];
        if self.config.outlier {
            sigma2[s] = OUTLIER_VARIANCE;
        }
        Ok(EmState {
            mean_re,
            mean_im,
            psi: g.constant(Tensor::full(&[c], 1.0 / c as f64)),
            sigma2: g.constant(Tensor::vector(sigma2)),
        })
    }

    /// Drops the outlier (when present) and decodes positions in meters, `[S, 3]`.
    pub fn decode(&self, g: &Graph, params: &[Var], state: &EmState, room: &RoomSpec) -> Result<(Var, Var, Var)> {
        let (mut re, mut im) = (state.mean_re, state.mean_im);
        if self.config.outlier {
            let dropped = outlier_index(g.value(state.sigma2).data());
            let keep: Vec<usize> = (0..self.num_clusters()).filter(|&c| c != dropped).collect();
            re = g.gather(re, &keep)?;
            im = g.gather(im, &keep)?;
        }
        let flat = g.concat(&[re, im]);
        let out = self.decoder.apply(g, params, flat)?;
        let out = g.reshape(out, &[self.num_speakers, 3])?;
        let dims = g.constant(Tensor::vector(room.dims().to_vec()));
        Ok((g.mul(out, dims)?, re, im))
    }

    /// Whole forward pass on one tape; returns the loss when `truth` is given,
    /// else the decoded positions.
    fn forward_on(&self, g: &Graph, bound: &Bound, obs: &ObservedPrp, ex: &Example, candidates: &[Position], with_loss: bool) -> Result<(Var, Var)> {
        let (re, im) = self.encode(g, &bound.encoder, &ex.room, candidates)?;
        let mut state = self.initial_state(g, re, im)?;
        for _ in 0..self.config.em_depth {
            state = em_layer(g, obs, &state, self.pinned())?;
        }
        let (pos, hat_re, hat_im) = self.decode(g, &bound.decoder, &state, &ex.room)?;
        if !with_loss {
            return Ok((pos, pos));
        }
        let l = loss(g, pos, hat_re, hat_im, &ex.sources, &ex.expected_prps(), self.config.lambda)?;
        Ok((l, pos))
    }

    /// Loss on a single tape built from `params` (in [`parameters`](Self::parameters) order).
    /// Meant for gradient checking; training uses [`loss_and_grad`](Self::loss_and_grad).
    pub fn loss_on_graph(&self, g: &Graph, params: &[Var], ex: &Example, candidates: &[Position]) -> Result<Var> {
        self.check_example(&ex.prp, candidates)?;
        let split = 2 * self.encoder.layers.len();
        let bound = Bound {
            encoder: params[..split].to_vec(),
            decoder: params[split..].to_vec(),
        };
        let obs = ObservedPrp::bind(g, &ex.prp);
        Ok(self.forward_on(g, &bound, &obs, ex, candidates, true)?.0)
    }

    /// EM state after the full unroll, computed on short-lived tapes so
    /// memory stays flat.
    fn unrolled_values(&self, prp: &PRPField, room: &RoomSpec, candidates: &[Position]) -> Result<EmValues> {
        self.check_example(prp, candidates)?;
        let head = Graph::new();
        let bound = self.bind(&head, false);
        let (re, im) = self.encode(&head, &bound.encoder, room, candidates)?;
        let init = self.initial_state(&head, re, im)?;
        let mut values = EmValues::read(&head, &init);
        let chunk = self.config.checkpoint_every.max(1);
        let mut done = 0;
        while done < self.config.em_depth {
            let n = chunk.min(self.config.em_depth - done);
            values = self.run_segment(prp, &values, n, false)?.1;
            done += n;
        }
        Ok(values)
    }

    /// Decoded speaker positions.
    pub fn infer(&self, prp: &PRPField, room: &RoomSpec, candidates: &[Position]) -> Result<Vec<Position>> {
        let values = self.unrolled_values(prp, room, candidates)?;
        let g = Graph::new();
        let state = values.bind(&g, false);
        let bound = self.bind(&g, false);
        let (pos, _, _) = self.decode(&g, &bound.decoder, &state, room)?;
        let v = g.value(pos);
        Ok(to_positions(v.data()))
    }

    /// Loss and decoded positions for one example, without gradients.
    pub fn evaluate_loss(&self, ex: &Example, candidates: &[Position]) -> Result<(f64, Vec<Position>)> {
        let values = self.unrolled_values(&ex.prp, &ex.room, candidates)?;
        let g = Graph::new();
        let state = values.bind(&g, false);
        let bound = self.bind(&g, false);
        let (pos, hat_re, hat_im) = self.decode(&g, &bound.decoder, &state, &ex.room)?;
        let l = loss(&g, pos, hat_re, hat_im, &ex.sources, &ex.expected_prps(), self.config.lambda)?;
        let v = g.value(l).item();
        let positions = to_positions(g.value(pos).data());
        Ok((v, positions))
    }

    /// Runs `layers` EM layers from `start` on a fresh tape.
    fn run_segment(&self, prp: &PRPField, start: &EmValues, layers: usize, differentiable: bool) -> Result<(Graph, EmValues, EmState, EmState)> {
        let g = Graph::new();
        let obs = ObservedPrp::bind(&g, prp);
        let input = start.bind(&g, differentiable);
        let mut state = input;
        for _ in 0..layers {
            state = em_layer(&g, &obs, &state, self.pinned())?;
        }
        let values = EmValues::read(&g, &state);
        Ok((g, values, input, state))
    }

    /// Loss and parameter gradients for one example.
    ///
    /// EM states are stored every `checkpoint_every` layers; the backward
    /// pass recomputes each segment on its own tape and chains the state
    /// cotangents across segment boundaries.
    pub fn loss_and_grad(&self, ex: &Example, candidates: &[Position]) -> Result<LossGrad> {
        self.check_example(&ex.prp, candidates)?;
        let depth = self.config.em_depth;
        let tracked = self.config.backprop_depth.unwrap_or(depth).min(depth);

        // Encoder tape.
        let head = Graph::new();
        let enc_params: Vec<Var> = self.encoder.tensors().map(|t| head.param(t.clone())).collect();
        let (re, im) = self.encode(&head, &enc_params, &ex.room, candidates)?;
        let init = self.initial_state(&head, re, im)?;

        // Segment boundaries: every `checkpoint_every` layers, plus the truncation point.
        let mut bounds = vec![0, depth - tracked];
        if self.config.checkpoint_every > 0 {
            bounds.extend((0..depth).step_by(self.config.checkpoint_every));
        }
        bounds.push(depth);
        bounds.sort_unstable();
        bounds.dedup();

        let mut states = vec![EmValues::read(&head, &init)];
        for w in bounds.windows(2) {
            let next = self.run_segment(&ex.prp, states.last().unwrap(), w[1] - w[0], false)?.1;
            states.push(next);
        }

        // Decoder + loss tape.
        let tail = Graph::new();
        let final_state = states.last().unwrap().bind(&tail, true);
        let dec_params: Vec<Var> = self.decoder.tensors().map(|t| tail.param(t.clone())).collect();
        let (pos, hat_re, hat_im) = self.decode(&tail, &dec_params, &final_state, &ex.room)?;
        let l = loss(&tail, pos, hat_re, hat_im, &ex.sources, &ex.expected_prps(), self.config.lambda)?;
        let loss_value = tail.value(l).item();
        let positions = to_positions(tail.value(pos).data());
        let grads = tail.backward(l)?;
        let dec_grads: Vec<Vec<f64>> = dec_params.iter().map(|&v| grads.get_or_zeros(&tail, v)).collect();
        let mut cot: Vec<Vec<f64>> = final_state.vars().iter().map(|&v| grads.get_or_zeros(&tail, v)).collect();

        // Walk segments backwards while inside the tracked depth.
        let mut reached_input = tracked == depth;
        for i in (0..bounds.len() - 1).rev() {
            if bounds[i] < depth - tracked {
                reached_input = false;
                break;
            }
            let (g, _, input, output) = self.run_segment(&ex.prp, &states[i], bounds[i + 1] - bounds[i], true)?;
            let seeds: Vec<(Var, Vec<f64>)> = output.vars().into_iter().zip(cot).collect();
            let grads = g.backward_seeded(&seeds)?;
            cot = input.vars().iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
            if bounds[i] == 0 {
                reached_input = true;
            }
        }

        let enc_grads: Vec<Vec<f64>> = if reached_input {
            // psi and sigma2 start as constants; only the means carry back to the encoder.
            let seeds = vec![(init.mean_re, cot[0].clone()), (init.mean_im, cot[1].clone())];
            let grads = head.backward_seeded(&seeds)?;
            enc_params.iter().map(|&v| grads.get_or_zeros(&head, v)).collect()
        } else {
            self.encoder.tensors().map(|t| vec![0.0; t.len()]).collect()
        };

        Ok(LossGrad {
            loss: loss_value,
            positions,
            grads: enc_grads.into_iter().chain(dec_grads).collect(),
        })
    }
}

fn to_positions(flat: &[f64]) -> Vec<Position> {
    flat.chunks(3).map(|c| Position::new(c[0], c[1], c[2])).collect()
}

/// Every permutation of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Permutation-invariant training loss:
/// `min_perm (1 - lambda) * MSE(pos) + lambda * (1 - cos(phi_hat, phi_true))`.
///
/// `pred` is `[S, 3]` in meters; `hat_re`/`hat_im` are the refined means
/// `[S, K, M]`; `phi_true` the expected PRPs at the true positions.
pub fn loss(g: &Graph, pred: Var, hat_re: Var, hat_im: Var, truth: &[Position], phi_true: &Array3<Complex64>, lambda: f64) -> Result<Var> {
    let s = truth.len();
    if g.shape(pred) != [s, 3] || phi_true.dim().0 != s || g.shape(hat_re)[..] != [phi_true.dim().0, phi_true.dim().1, phi_true.dim().2] {
        return Err(Error::Shape(format!(
            "loss: pred {:?}, hat {:?}, truth {s}, phi_true {:?}",
            g.shape(pred),
            g.shape(hat_re),
            phi_true.dim()
        )));
    }
    let hat_sq = g.add(g.sum_all(g.square(hat_re)), g.sum_all(g.square(hat_im)))?;
    let hat_norm = g.max_floor(g.sqrt(hat_sq), 1e-12);
    let true_norm = phi_true.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt().max(1e-12);
    let shape = g.shape(hat_re);

    let mut best: Option<Var> = None;
    for perm in permutations(s) {
        let target: Vec<f64> = perm.iter().flat_map(|&i| truth[i].0).collect();
        let target = g.constant(Tensor::new(vec![s, 3], target)?);
        let mse = g.scale(g.sum_all(g.square(g.sub(pred, target)?)), 1.0 / (3 * s) as f64);

        let slab = |f: fn(&Complex64) -> f64| -> Result<Var> {
            let data = perm.iter().flat_map(|&i| phi_true.slice(ndarray::s![i, .., ..]).iter().map(f).collect::<Vec<_>>()).collect();
            Ok(g.constant(Tensor::new(shape.clone(), data)?))
        };
        let (t_re, t_im) = (slab(|z| z.re)?, slab(|z| z.im)?);
        let dot = g.add(g.sum_all(g.mul(hat_re, t_re)?), g.sum_all(g.mul(hat_im, t_im)?))?;
        let cos = g.scale(g.div(dot, hat_norm)?, 1.0 / true_norm);
        let term = g.add(g.scale(mse, 1.0 - lambda), g.affine(cos, -lambda, lambda))?;
        best = Some(match best {
            None => term,
            Some(b) => g.min2(b, term)?,
        });
    }
    best.ok_or_else(|| Error::Shape("loss with no speakers".into()))
}
