//! Whole-model assembly and recording chunking.
//!
//! `Model` owns no tensors itself; every trainable array lives in a shared
//! [`ParamStore`] so the optimizer and the checkpoint writer can treat the
//! model as a flat list of named parameters. One speech encoder and one head
//! encoder serve both speakers. The per-turn encode and backward plumbing
//! here is shared by the trainer and the streamer.

use ndarray::{s, Array2};

use crate::config::{ModelConfig, HEAD_DIM};
use crate::context::{SpecialTokens, TurnGrads, TurnTokens};
use crate::diffusion::{DiffusionHead, NoiseSchedule};
use crate::error::{Error, Result};
use crate::featurize::{chunk_features, HeadCache, HeadEncoder, SpeechCache, SpeechEncoder};
use crate::fusion::Fusion;
use crate::nn::{Grads, ParamStore, Real};

/// Encoder-ready inputs for one turn: resampled speech features for both
/// speakers plus both speakers' raw head frames. Head frames stay in f64 so
/// normalization happens in full precision wherever they are consumed.
#[derive(Debug, Clone)]
pub struct TurnInput<F> {
    pub user_feats: Array2<F>,
    pub agent_feats: Array2<F>,
    pub user_head: Array2<f64>,
    pub agent_head: Array2<f64>,
}

/// Splits an aligned dyadic recording into per-turn encoder inputs. The
/// recording must cover a whole number of turns, and the head tracks must
/// line up with the audio frame for frame.
pub fn chunk_sample<F: Real>(
    cfg: &ModelConfig,
    user_wave: &[f64],
    agent_wave: &[f64],
    user_head: &Array2<f64>,
    agent_head: &Array2<f64>,
) -> Result<Vec<TurnInput<F>>> {
    let spc = cfg.chunk_samples();
    let k = cfg.k_frames();
    if user_wave.len() != agent_wave.len() {
        return Err(Error::Shape {
            what: "agent waveform".into(),
            expected: format!("{} samples to match the user waveform", user_wave.len()),
            got: format!("{}", agent_wave.len()),
        });
    }
    if user_wave.is_empty() || user_wave.len() % spc != 0 {
        return Err(Error::Shape {
            what: "recording length".into(),
            expected: format!("a positive multiple of {spc} samples"),
            got: format!("{}", user_wave.len()),
        });
    }
    let n = user_wave.len() / spc;
    for (name, head) in [("user_head", user_head), ("agent_head", agent_head)] {
        if head.nrows() != n * k || head.ncols() != HEAD_DIM {
            return Err(Error::Shape {
                what: name.into(),
                expected: format!("[{}, {HEAD_DIM}]", n * k),
                got: format!("[{}, {}]", head.nrows(), head.ncols()),
            });
        }
    }
    (0..n)
        .map(|t| {
            let rows = s![t * k..(t + 1) * k, ..];
            Ok(TurnInput {
                user_feats: chunk_features(&user_wave[t * spc..(t + 1) * spc], cfg)?,
                agent_feats: chunk_features(&agent_wave[t * spc..(t + 1) * spc], cfg)?,
                user_head: user_head.slice(rows).to_owned(),
                agent_head: agent_head.slice(rows).to_owned(),
            })
        })
        .collect()
}

/// Forward caches for one encoded turn, consumed by [`Model::backward_turn`].
#[derive(Debug, Clone)]
pub struct TurnCaches<F> {
    pub user_speech: SpeechCache<F>,
    pub agent_speech: SpeechCache<F>,
    pub user_head: HeadCache<F>,
    pub agent_head: HeadCache<F>,
}

/// All submodules over one shared parameter store, plus the noise schedule
/// derived from the config.
#[derive(Debug, Clone)]
pub struct Model {
    pub speech_enc: SpeechEncoder,
    pub head_enc: HeadEncoder,
    pub specials: SpecialTokens,
    pub fusion: Fusion,
    pub diffusion: DiffusionHead,
    pub schedule: NoiseSchedule,
}

impl Model {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, seed: u64) -> Self {
        Model {
            speech_enc: SpeechEncoder::new(store, cfg, seed),
            head_enc: HeadEncoder::new(store, cfg, seed),
            specials: SpecialTokens::new(store, cfg, seed),
            fusion: Fusion::new(store, cfg, seed),
            diffusion: DiffusionHead::new(store, cfg, seed),
            schedule: NoiseSchedule::cosine(cfg.diff_train_steps),
        }
    }

    /// Encodes one turn's four streams into token rows.
    pub fn encode_turn<F: Real>(
        &self,
        store: &ParamStore<F>,
        turn: &TurnInput<F>,
    ) -> (TurnTokens<F>, TurnCaches<F>) {
        let (user_speech, us_cache) = self.speech_enc.forward(store, &turn.user_feats);
        let (agent_speech, as_cache) = self.speech_enc.forward(store, &turn.agent_feats);
        let (user_head, uh_cache) = self.head_enc.forward(store, &turn.user_head.mapv(F::of));
        let (agent_head, ah_cache) = self.head_enc.forward(store, &turn.agent_head.mapv(F::of));
        (
            TurnTokens { user_speech, agent_speech, user_head, agent_head },
            TurnCaches {
                user_speech: us_cache,
                agent_speech: as_cache,
                user_head: uh_cache,
                agent_head: ah_cache,
            },
        )
    }

    /// Routes one turn's token gradients back through the shared encoders.
    /// Streams are processed in a fixed order so batched gradient sums are
    /// reproducible.
    pub fn backward_turn<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        caches: &TurnCaches<F>,
        d: &TurnGrads<F>,
    ) {
        self.speech_enc.backward(store, grads, &caches.user_speech, &d.user_speech);
        self.speech_enc.backward(store, grads, &caches.agent_speech, &d.agent_speech);
        self.head_enc.backward(store, grads, &caches.user_head, &d.user_head);
        self.head_enc.backward(store, grads, &caches.agent_head, &d.agent_head);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::tiny();
        cfg.c = 0.2;
        cfg.n_max = 4;
        cfg.validate().unwrap();
        cfg
    }

    fn dummy_recording(cfg: &ModelConfig, turns: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Array2<f64>, Array2<f64>) {
        let mut rng = RandomStream::new(seed, "model/test");
        let samples = turns * cfg.chunk_samples();
        let frames = turns * cfg.k_frames();
        let uw: Vec<f64> = (0..samples).map(|_| rng.normal() * 0.1).collect();
        let aw: Vec<f64> = (0..samples).map(|_| rng.normal() * 0.1).collect();
        let uh = Array2::from_shape_simple_fn((frames, HEAD_DIM), || rng.normal());
        let ah = Array2::from_shape_simple_fn((frames, HEAD_DIM), || rng.normal());
        (uw, aw, uh, ah)
    }

    #[test]
    fn chunking_splits_on_exact_turn_boundaries() {
        let cfg = tiny_cfg();
        let (uw, aw, uh, ah) = dummy_recording(&cfg, 3, 1);
        let turns = chunk_sample::<f64>(&cfg, &uw, &aw, &uh, &ah).unwrap();
        assert_eq!(turns.len(), 3);
        let k = cfg.k_frames();
        for (t, turn) in turns.iter().enumerate() {
            assert_eq!(turn.user_feats.dim(), (k, cfg.d_raw));
            assert_eq!(turn.agent_feats.dim(), (k, cfg.d_raw));
            assert_eq!(turn.user_head, uh.slice(s![t * k..(t + 1) * k, ..]).to_owned());
            assert_eq!(turn.agent_head, ah.slice(s![t * k..(t + 1) * k, ..]).to_owned());
            let expect = chunk_features::<f64>(
                &uw[t * cfg.chunk_samples()..(t + 1) * cfg.chunk_samples()],
                &cfg,
            )
            .unwrap();
            assert_eq!(turn.user_feats, expect);
        }
    }

    #[test]
    fn chunking_rejects_ragged_input() {
        let cfg = tiny_cfg();
        let (uw, aw, uh, ah) = dummy_recording(&cfg, 2, 2);

        let short = &uw[..uw.len() - 1];
        assert!(matches!(
            chunk_sample::<f64>(&cfg, short, &aw[..short.len()], &uh, &ah),
            Err(Error::Shape { .. })
        ));

        assert!(matches!(
            chunk_sample::<f64>(&cfg, &uw, &aw[..aw.len() - 1], &uh, &ah),
            Err(Error::Shape { .. })
        ));

        let bad_head = Array2::<f64>::zeros((uh.nrows() - 1, HEAD_DIM));
        assert!(matches!(
            chunk_sample::<f64>(&cfg, &uw, &aw, &bad_head, &ah),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn model_registers_the_documented_parameter_names() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let _model = Model::new(&mut store, &cfg, 7);
        for name in [
            "speech.lift.w",
            "speech.proj.w",
            "head.mlp.l1.w",
            "head.mlp.l3.b",
            "ctx.sep",
            "ctx.mask",
            "ctx.fake",
            "fusion.P1",
            "fusion.in_proj.w",
            "fusion.layer0.attn.wq.w",
            "fusion.final_ln.g",
            "diff.P2",
            "diff.input_lift.w",
            "diff.block0.mod.w",
            "diff.out.w",
        ] {
            assert!(store.find(name).is_some(), "missing parameter {name}");
        }
        assert_eq!(
            store.value(store.find("fusion.P1").unwrap()).shape(),
            &[cfg.flat_capacity(), cfg.d_e]
        );
        assert_eq!(
            store.value(store.find("diff.P2").unwrap()).shape(),
            &[cfg.frame_capacity(), cfg.d_m]
        );
    }

    #[test]
    fn encode_turn_produces_aligned_token_blocks() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = Model::new(&mut store, &cfg, 8);
        let (uw, aw, uh, ah) = dummy_recording(&cfg, 1, 3);
        let turns = chunk_sample::<f64>(&cfg, &uw, &aw, &uh, &ah).unwrap();
        let (tokens, _) = model.encode_turn(&store, &turns[0]);
        let k = cfg.k_frames();
        assert_eq!(tokens.user_speech.dim(), (k, cfg.d_t));
        assert_eq!(tokens.agent_speech.dim(), (k, cfg.d_t));
        assert_eq!(tokens.user_head.dim(), (k, cfg.d_t));
        assert_eq!(tokens.agent_head.dim(), (k, cfg.d_t));
        // The shared encoders treat both speakers identically.
        let swapped = TurnInput {
            user_feats: turns[0].agent_feats.clone(),
            agent_feats: turns[0].user_feats.clone(),
            user_head: turns[0].agent_head.clone(),
            agent_head: turns[0].user_head.clone(),
        };
        let (tok2, _) = model.encode_turn(&store, &swapped);
        assert_eq!(tok2.user_speech, tokens.agent_speech);
        assert_eq!(tok2.agent_head, tokens.user_head);
    }
}
