//! Interleaved token window assembly.
//!
//! Each turn contributes a fixed row layout to the flat sequence:
//! turn-begin, then the four modality blocks (user speech, agent speech,
//! user head, agent head), each wrapped in its own begin and end separator,
//! then turn-end. With `k` frames per block a turn occupies `4k + 10` rows.
//! Ten learnable separator embeddings are shared across turns.
//!
//! After assembly, agent head rows can be replaced by the learnable mask
//! token (the positions the model must reconstruct) and all user content
//! rows by the learnable fake token (the unconditional branch used for
//! guidance). Every replacement is recorded per row, so the backward scatter
//! routes gradients to exactly the tensor that produced each row.

use ndarray::{Array1, Array2};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{uniform_init1, uniform_init2, Grads, ParamId, ParamStore, Real};
use crate::rng::RandomStream;

pub const SEP_TURN_BEGIN: usize = 0;
pub const SEP_USER_SPEECH_BEGIN: usize = 1;
pub const SEP_USER_SPEECH_END: usize = 2;
pub const SEP_AGENT_SPEECH_BEGIN: usize = 3;
pub const SEP_AGENT_SPEECH_END: usize = 4;
pub const SEP_USER_HEAD_BEGIN: usize = 5;
pub const SEP_USER_HEAD_END: usize = 6;
pub const SEP_AGENT_HEAD_BEGIN: usize = 7;
pub const SEP_AGENT_HEAD_END: usize = 8;
pub const SEP_TURN_END: usize = 9;
pub const NUM_SEPS: usize = 10;

/// One of the four per-turn content streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    UserSpeech,
    AgentSpeech,
    UserHead,
    AgentHead,
}

/// What currently occupies one flat row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSource {
    /// Shared separator embedding `sep`.
    Sep { turn: usize, sep: usize },
    /// Row `frame` of a turn's content stream.
    Content { turn: usize, stream: Stream, frame: usize },
    /// Agent head slot replaced by the mask token.
    Masked { turn: usize, frame: usize },
    /// User content slot replaced by the fake token.
    Dropped { turn: usize, stream: Stream, frame: usize },
}

impl RowSource {
    pub fn turn(&self) -> usize {
        match *self {
            RowSource::Sep { turn, .. }
            | RowSource::Content { turn, .. }
            | RowSource::Masked { turn, .. }
            | RowSource::Dropped { turn, .. } => turn,
        }
    }
}

/// The learnable non-content embeddings: ten separators, the mask token,
/// and the fake token.
#[derive(Debug, Clone)]
pub struct SpecialTokens {
    pub sep: ParamId,
    pub mask: ParamId,
    pub fake: ParamId,
}

impl SpecialTokens {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, seed: u64) -> Self {
        let d = cfg.d_t;
        let mut rs = RandomStream::new(seed, "init/ctx.sep");
        let mut rm = RandomStream::new(seed, "init/ctx.mask");
        let mut rf = RandomStream::new(seed, "init/ctx.fake");
        SpecialTokens {
            sep: store.add2("ctx.sep", uniform_init2(NUM_SEPS, d, d, &mut rs), false),
            mask: store.add1("ctx.mask", uniform_init1(d, d, &mut rm), false),
            fake: store.add1("ctx.fake", uniform_init1(d, d, &mut rf), false),
        }
    }
}

/// Encoded token rows for one turn, all `[k, d_t]`.
#[derive(Debug, Clone)]
pub struct TurnTokens<F> {
    pub user_speech: Array2<F>,
    pub agent_speech: Array2<F>,
    pub user_head: Array2<F>,
    pub agent_head: Array2<F>,
}

/// Gradient rows routed back to one turn's encoders, all `[k, d_t]`.
/// Rows whose flat slot was replaced by mask or fake stay zero.
#[derive(Debug, Clone)]
pub struct TurnGrads<F> {
    pub user_speech: Array2<F>,
    pub agent_speech: Array2<F>,
    pub user_head: Array2<F>,
    pub agent_head: Array2<F>,
}

/// A fully assembled flat window plus the per-row bookkeeping.
#[derive(Debug, Clone)]
pub struct WindowTokens<F> {
    pub flat: Array2<F>,
    pub sources: Vec<RowSource>,
    pub n_turns: usize,
    pub k: usize,
}

/// Number of masked agent head positions for a window: `ceil(r * frames)`,
/// with products that land within 1e-9 of an integer snapped first so the
/// default `0.7 * 200` counts as exactly 140.
pub fn mask_count(frames: usize, r: f64) -> usize {
    let raw = r * frames as f64;
    let near = raw.round();
    if (raw - near).abs() < 1e-9 {
        near as usize
    } else {
        raw.ceil() as usize
    }
}

impl<F: Real> WindowTokens<F> {
    /// Assembles the flat window from per-turn encoded streams and the
    /// shared separator embeddings.
    pub fn interleave(
        store: &ParamStore<F>,
        ctx: &SpecialTokens,
        turns: &[TurnTokens<F>],
    ) -> Result<WindowTokens<F>> {
        if turns.is_empty() {
            return Err(Error::Shape {
                what: "window".into(),
                expected: "at least one turn".into(),
                got: "0 turns".into(),
            });
        }
        let sep = store.get2(ctx.sep);
        let d = sep.ncols();
        let k = turns[0].user_speech.nrows();
        for (t, turn) in turns.iter().enumerate() {
            for (label, arr) in [
                ("user_speech", &turn.user_speech),
                ("agent_speech", &turn.agent_speech),
                ("user_head", &turn.user_head),
                ("agent_head", &turn.agent_head),
            ] {
                if arr.nrows() != k || arr.ncols() != d {
                    return Err(Error::Shape {
                        what: format!("turn {t} {label}"),
                        expected: format!("[{k}, {d}]"),
                        got: format!("[{}, {}]", arr.nrows(), arr.ncols()),
                    });
                }
            }
        }

        let n = turns.len();
        let turn_len = 4 * k + 10;
        let mut flat = Array2::<F>::zeros((n * turn_len, d));
        let mut sources = Vec::with_capacity(n * turn_len);
        let mut row = 0;
        let put_sep = |flat: &mut Array2<F>, sources: &mut Vec<RowSource>, row: &mut usize, turn: usize, s: usize| {
            flat.row_mut(*row).assign(&sep.row(s));
            sources.push(RowSource::Sep { turn, sep: s });
            *row += 1;
        };
        for (t, turn) in turns.iter().enumerate() {
            let blocks = [
                (SEP_USER_SPEECH_BEGIN, Stream::UserSpeech, &turn.user_speech, SEP_USER_SPEECH_END),
                (SEP_AGENT_SPEECH_BEGIN, Stream::AgentSpeech, &turn.agent_speech, SEP_AGENT_SPEECH_END),
                (SEP_USER_HEAD_BEGIN, Stream::UserHead, &turn.user_head, SEP_USER_HEAD_END),
                (SEP_AGENT_HEAD_BEGIN, Stream::AgentHead, &turn.agent_head, SEP_AGENT_HEAD_END),
            ];
            put_sep(&mut flat, &mut sources, &mut row, t, SEP_TURN_BEGIN);
            for (begin, stream, arr, end) in blocks {
                put_sep(&mut flat, &mut sources, &mut row, t, begin);
                for frame in 0..k {
                    flat.row_mut(row).assign(&arr.row(frame));
                    sources.push(RowSource::Content { turn: t, stream, frame });
                    row += 1;
                }
                put_sep(&mut flat, &mut sources, &mut row, t, end);
            }
            put_sep(&mut flat, &mut sources, &mut row, t, SEP_TURN_END);
        }
        debug_assert_eq!(row, n * turn_len);
        Ok(WindowTokens { flat, sources, n_turns: n, k })
    }

    pub fn turn_len(&self) -> usize {
        4 * self.k + 10
    }

    /// Flat row holding agent head frame `frame` of turn `turn`.
    pub fn agent_head_row(&self, turn: usize, frame: usize) -> usize {
        debug_assert!(turn < self.n_turns && frame < self.k);
        turn * self.turn_len() + 8 + 3 * self.k + frame
    }

    /// Per-row visible key counts for turn-level causal attention: row `q`
    /// may attend to every row of its own turn and of earlier turns, which
    /// is exactly the flat prefix ending at its turn boundary.
    pub fn prefix_bounds(&self) -> Vec<usize> {
        let tl = self.turn_len();
        self.sources.iter().map(|s| (s.turn() + 1) * tl).collect()
    }

    /// Replaces the listed agent head slots with the mask token. Entries are
    /// window-global frame indices, `turn * k + frame`.
    pub fn mask_agent_frames(
        &mut self,
        store: &ParamStore<F>,
        ctx: &SpecialTokens,
        frames: &[usize],
    ) {
        let mask = store.get1(ctx.mask);
        for &g in frames {
            let (turn, frame) = (g / self.k, g % self.k);
            let row = self.agent_head_row(turn, frame);
            self.flat.row_mut(row).assign(&mask);
            self.sources[row] = RowSource::Masked { turn, frame };
        }
    }

    /// Replaces every user content row (speech and head) with the fake
    /// token. Separators and agent rows are left alone; applying this twice
    /// is the same as applying it once.
    pub fn drop_user_streams(&mut self, store: &ParamStore<F>, ctx: &SpecialTokens) {
        let fake = store.get1(ctx.fake);
        for row in 0..self.sources.len() {
            let replace = match self.sources[row] {
                RowSource::Content { turn, stream: stream @ (Stream::UserSpeech | Stream::UserHead), frame } => {
                    Some((turn, stream, frame))
                }
                RowSource::Dropped { turn, stream, frame } => Some((turn, stream, frame)),
                _ => None,
            };
            if let Some((turn, stream, frame)) = replace {
                self.flat.row_mut(row).assign(&fake);
                self.sources[row] = RowSource::Dropped { turn, stream, frame };
            }
        }
    }

    /// Window-global frame indices currently masked, in row order.
    pub fn masked_frames(&self) -> Vec<usize> {
        self.sources
            .iter()
            .filter_map(|s| match *s {
                RowSource::Masked { turn, frame } => Some(turn * self.k + frame),
                _ => None,
            })
            .collect()
    }

    /// Routes a gradient over the flat rows back to its producers: content
    /// rows to per-turn stream buffers, separator rows into the shared
    /// separator table, masked and dropped rows into the mask and fake
    /// tokens.
    pub fn scatter_backward(
        &self,
        grads: &mut Grads<F>,
        ctx: &SpecialTokens,
        dflat: &Array2<F>,
    ) -> Vec<TurnGrads<F>> {
        debug_assert_eq!(dflat.nrows(), self.sources.len());
        let d = dflat.ncols();
        let mut turns: Vec<TurnGrads<F>> = (0..self.n_turns)
            .map(|_| TurnGrads {
                user_speech: Array2::zeros((self.k, d)),
                agent_speech: Array2::zeros((self.k, d)),
                user_head: Array2::zeros((self.k, d)),
                agent_head: Array2::zeros((self.k, d)),
            })
            .collect();
        let mut dsep = Array2::<F>::zeros((NUM_SEPS, d));
        let mut dmask = Array1::<F>::zeros(d);
        let mut dfake = Array1::<F>::zeros(d);
        for (row, src) in self.sources.iter().enumerate() {
            let g = dflat.row(row);
            match *src {
                RowSource::Sep { sep, .. } => {
                    let mut acc = dsep.row_mut(sep);
                    acc += &g;
                }
                RowSource::Content { turn, stream, frame } => {
                    let buf = match stream {
                        Stream::UserSpeech => &mut turns[turn].user_speech,
                        Stream::AgentSpeech => &mut turns[turn].agent_speech,
                        Stream::UserHead => &mut turns[turn].user_head,
                        Stream::AgentHead => &mut turns[turn].agent_head,
                    };
                    buf.row_mut(frame).assign(&g);
                }
                RowSource::Masked { .. } => dmask += &g,
                RowSource::Dropped { .. } => dfake += &g,
            }
        }
        grads.acc2(ctx.sep, &dsep);
        grads.acc1(ctx.mask, &dmask);
        grads.acc1(ctx.fake, &dfake);
        turns
    }
}
