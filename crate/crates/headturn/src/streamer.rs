//! Turn-by-turn generation: a rolling context of past turns, window assembly
//! with mask tokens standing in for the agent's head, and guided denoising
//! of each turn's frames.
//!
//! The buffer never stores predictions. Past turns keep their agent-head
//! slots filled with the mask token, exactly as they looked during training,
//! so a turn's output is a function of observed inputs and the seed alone
//! and sampling mistakes cannot compound across turns.

use std::collections::VecDeque;

use ndarray::{s, Array2, ArrayView2};

use crate::config::{ModelConfig, HEAD_DIM};
use crate::context::{TurnTokens, WindowTokens};
use crate::datagen::DialogueSample;
use crate::diffusion;
use crate::error::{Error, Result};
use crate::featurize::chunk_features;
use crate::model::Model;
use crate::nn::{ParamStore, Real};
use crate::rng::RandomStream;
use crate::trainer::NormStats;

/// Rolling window of past tokenized turns, oldest evicted first.
#[derive(Debug, Clone)]
pub struct ContextBuffer<F> {
    capacity: usize,
    turns: VecDeque<TurnTokens<F>>,
}

impl<F: Real> ContextBuffer<F> {
    /// `capacity` is the number of history turns kept; 0 means every turn is
    /// generated without context.
    pub fn new(capacity: usize) -> Self {
        ContextBuffer { capacity, turns: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn push(&mut self, turn: TurnTokens<F>) {
        if self.capacity == 0 {
            return;
        }
        self.turns.push_back(turn);
        while self.turns.len() > self.capacity {
            self.turns.pop_front();
        }
    }

    fn window_with(&self, current: &TurnTokens<F>) -> Vec<TurnTokens<F>> {
        let mut w: Vec<TurnTokens<F>> = self.turns.iter().cloned().collect();
        w.push(current.clone());
        w
    }
}

/// One turn of observed inputs: both speakers' audio and the user's head
/// frames. The agent's head is what gets generated.
pub struct TurnObservation<'a> {
    pub user_wave: &'a [f64],
    pub agent_wave: &'a [f64],
    pub user_head: ArrayView2<'a, f64>,
}

/// Splits one recording into per-turn observations without copying.
pub fn split_turns<'a>(
    cfg: &ModelConfig,
    sample: &'a DialogueSample,
) -> Result<Vec<TurnObservation<'a>>> {
    let cs = cfg.chunk_samples();
    let k = cfg.k_frames();
    let len = sample.user_wave.len();
    if len == 0 || len % cs != 0 || sample.agent_wave.len() != len {
        return Err(Error::Shape {
            what: format!("sample {} audio", sample.id),
            expected: format!("equal nonempty multiples of {cs} samples"),
            got: format!("{} user, {} agent", len, sample.agent_wave.len()),
        });
    }
    let n = len / cs;
    if sample.user_head.dim() != (n * k, HEAD_DIM) {
        return Err(Error::Shape {
            what: format!("sample {} user head", sample.id),
            expected: format!("[{}, {HEAD_DIM}]", n * k),
            got: format!("{:?}", sample.user_head.shape()),
        });
    }
    Ok((0..n)
        .map(|t| TurnObservation {
            user_wave: &sample.user_wave[t * cs..(t + 1) * cs],
            agent_wave: &sample.agent_wave[t * cs..(t + 1) * cs],
            user_head: sample.user_head.slice(s![t * k..(t + 1) * k, ..]),
        })
        .collect())
}

/// Read-only sampling front end over trained weights.
pub struct Streamer<'m, F> {
    pub store: &'m ParamStore<F>,
    pub model: &'m Model,
    pub cfg: &'m ModelConfig,
    pub norm: &'m NormStats,
}

impl<'m, F: Real> Streamer<'m, F> {
    pub fn new(
        store: &'m ParamStore<F>,
        model: &'m Model,
        cfg: &'m ModelConfig,
        norm: &'m NormStats,
    ) -> Self {
        Streamer { store, model, cfg, norm }
    }

    /// Tokenizes one turn's observed streams. The agent-head block is
    /// K_frames copies of the mask token; the caller decides when the turn
    /// enters the buffer (generate_turn does it after sampling).
    pub fn push_turn(
        &self,
        user_wave: &[f64],
        agent_wave: &[f64],
        user_head: ArrayView2<'_, f64>,
    ) -> Result<TurnTokens<F>> {
        let cs = self.cfg.chunk_samples();
        let k = self.cfg.k_frames();
        if user_wave.len() != cs || agent_wave.len() != cs {
            return Err(Error::Shape {
                what: "turn audio".into(),
                expected: format!("{cs} samples per stream"),
                got: format!("{} user, {} agent", user_wave.len(), agent_wave.len()),
            });
        }
        if user_head.dim() != (k, HEAD_DIM) {
            return Err(Error::Shape {
                what: "turn head frames".into(),
                expected: format!("[{k}, {HEAD_DIM}]"),
                got: format!("{:?}", user_head.shape()),
            });
        }
        let user_feats = chunk_features::<F>(user_wave, self.cfg)?;
        let agent_feats = chunk_features::<F>(agent_wave, self.cfg)?;
        let (user_speech, _) = self.model.speech_enc.forward(self.store, &user_feats);
        let (agent_speech, _) = self.model.speech_enc.forward(self.store, &agent_feats);
        let head_in = user_head.mapv(F::of);
        let (user_tokens, _) = self.model.head_enc.forward(self.store, &head_in);
        let mask = self.store.get1(self.model.specials.mask);
        let agent_head = Array2::from_shape_fn((k, mask.len()), |(_, j)| mask[j]);
        Ok(TurnTokens { user_speech, agent_speech, user_head: user_tokens, agent_head })
    }

    /// Samples the current turn's agent head frames given the buffered
    /// context, then appends the turn (agent slots still masked) to the
    /// buffer. Returns denormalized frames of shape [K_frames, 56].
    pub fn generate_turn(
        &self,
        buffer: &mut ContextBuffer<F>,
        current: TurnTokens<F>,
        omega: f64,
        steps_out: usize,
        rng: &mut RandomStream,
    ) -> Result<Array2<f64>> {
        let k = self.cfg.k_frames();
        let window = buffer.window_with(&current);
        if window.len() > self.cfg.n_max {
            return Err(Error::Capacity {
                what: "generation window turns".into(),
                limit: self.cfg.n_max,
                got: window.len(),
            });
        }
        let ctx = WindowTokens::interleave(self.store, &self.model.specials, &window)?;
        let prefix = ctx.prefix_bounds();
        let (fused, _) = self.model.fusion.forward(self.store, &ctx.flat, &prefix)?;
        let t_cur = window.len() - 1;
        let frames: Vec<usize> = (0..k).map(|j| t_cur * k + j).collect();
        let cond = gather_agent_rows(&fused, &ctx, t_cur, k);

        let uncond = if omega == 1.0 {
            None
        } else {
            let mut dropped = ctx.clone();
            dropped.drop_user_streams(self.store, &self.model.specials);
            let (fused_u, _) = self.model.fusion.forward(self.store, &dropped.flat, &prefix)?;
            Some(gather_agent_rows(&fused_u, &dropped, t_cur, k))
        };

        let predict = |x: &Array2<F>, taus: &[usize], c: &Array2<F>| {
            self.model.diffusion.forward(self.store, x, taus, c, &frames).0
        };
        let normalized = diffusion::sample(
            predict,
            &self.model.schedule,
            &cond,
            uncond.as_ref(),
            steps_out,
            omega,
            rng,
        )?;
        let out = self.norm.denormalize_rows(&normalized);
        buffer.push(current);
        Ok(out)
    }

    /// Runs push/generate over a whole conversation and concatenates the
    /// per-turn outputs. Turn `t` draws its noise from substream `t` of the
    /// conversation's stream, so replaying from any buffer snapshot with the
    /// same seed reproduces the tail exactly.
    pub fn run_conversation(
        &self,
        turns: &[TurnObservation<'_>],
        context_turns: usize,
        omega: f64,
        steps_out: usize,
        seed: u64,
    ) -> Result<Array2<f64>> {
        let k = self.cfg.k_frames();
        let mut buffer = ContextBuffer::new(context_turns);
        let base = RandomStream::new(seed, "stream/turn");
        let mut out = Array2::zeros((turns.len() * k, HEAD_DIM));
        for (t, obs) in turns.iter().enumerate() {
            let tokens = self.push_turn(obs.user_wave, obs.agent_wave, obs.user_head)?;
            let mut rng = base.substream(t as u64);
            let frames = self.generate_turn(&mut buffer, tokens, omega, steps_out, &mut rng)?;
            out.slice_mut(s![t * k..(t + 1) * k, ..]).assign(&frames);
        }
        Ok(out)
    }
}

fn gather_agent_rows<F: Real>(
    fused: &Array2<F>,
    ctx: &WindowTokens<F>,
    turn: usize,
    k: usize,
) -> Array2<F> {
    let mut out = Array2::zeros((k, fused.ncols()));
    for j in 0..k {
        out.row_mut(j).assign(&fused.row(ctx.agent_head_row(turn, j)));
    }
    out
}
