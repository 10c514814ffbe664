//! Trainable models for every decoding method, sharing one frame encoder
//! design and one parameter store per model.

pub mod ar;
pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod decoders;
pub mod encoder;
pub mod losses;
pub mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ctc::Vocab;
use crate::error::{Error, Result};
use crate::nn::layers::{Embedding, Linear};
use crate::nn::ParamStore;

pub use config::Config;
use decoders::{FrameDecoder, SlotHead, TokenDecoder};
use encoder::Encoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ctc,
    MaskCtc,
    IMaskCtc,
    AlignDenoise,
    InterCtc,
    SelfCond,
    Insertion,
    Kermit,
    CifNa,
    Ar,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Ctc,
        Method::MaskCtc,
        Method::IMaskCtc,
        Method::AlignDenoise,
        Method::InterCtc,
        Method::SelfCond,
        Method::Insertion,
        Method::Kermit,
        Method::CifNa,
        Method::Ar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ctc => "ctc",
            Method::MaskCtc => "maskctc",
            Method::IMaskCtc => "imaskctc",
            Method::AlignDenoise => "aligndenoise",
            Method::InterCtc => "interctc",
            Method::SelfCond => "selfcond",
            Method::Insertion => "insertion",
            Method::Kermit => "kermit",
            Method::CifNa => "cifna",
            Method::Ar => "ar",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// Method-specific networks next to the shared encoder.
#[derive(Debug, Clone)]
pub enum Head {
    /// Plain, intermediate and self-conditioned CTC.
    None,
    Cmlm {
        decoder: TokenDecoder,
        /// Present for the length-predicting variant.
        length: Option<Linear>,
    },
    Denoiser(FrameDecoder),
    Insertion {
        decoder: TokenDecoder,
        slots: SlotHead,
    },
    /// The encoder stack itself reads frames and tokens.
    Kermit {
        tokens: decoders::TokenInput,
        segment: Embedding,
        slots: SlotHead,
    },
    Cif {
        alpha: Linear,
        decoder: TokenDecoder,
    },
    Ar(TokenDecoder),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub method: Method,
    pub config: Config,
    pub vocab: Vocab,
    pub feat_dim: usize,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: Head,
}

impl Model {
    pub fn new(method: Method, config: Config, vocab: Vocab, feat_dim: usize) -> Result<Self> {
        let mc = &config.model;
        if mc.d_model == 0 || mc.heads == 0 || mc.d_model % mc.heads != 0 {
            return Err(Error::invalid("model width must be a positive multiple of the head count"));
        }
        if mc.enc_layers == 0 {
            return Err(Error::invalid("encoder needs at least one block"));
        }
        if !(0.0..1.0).contains(&mc.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        let mut store = ParamStore::new(config.train.seed);
        let taps = match method {
            Method::InterCtc | Method::SelfCond => config.tap_layers(),
            Method::MaskCtc | Method::IMaskCtc if config.mask_ctc.intermediate => config.tap_layers(),
            _ => Vec::new(),
        };
        let self_conditioned = method == Method::SelfCond && config.selfcond.enabled;
        let encoder = Encoder::new(
            &mut store,
            "enc",
            feat_dim,
            vocab.ctc_classes(),
            mc,
            taps,
            self_conditioned,
        )?;
        let head = match method {
            Method::Ctc | Method::InterCtc | Method::SelfCond => Head::None,
            Method::MaskCtc | Method::IMaskCtc => {
                let decoder = TokenDecoder::new(&mut store, "cmlm", &vocab, mc, vocab.size);
                let length = (method == Method::IMaskCtc).then(|| {
                    Linear::new(&mut store, "cmlm.length_head", mc.d_model, config.improved.length_classes)
                });
                if method == Method::IMaskCtc && config.improved.length_classes < 2 {
                    return Err(Error::invalid("length head needs at least two classes"));
                }
                Head::Cmlm { decoder, length }
            }
            Method::AlignDenoise => Head::Denoiser(FrameDecoder::new(&mut store, "denoise", &vocab, mc)),
            Method::Insertion => Head::Insertion {
                decoder: TokenDecoder::new(&mut store, "ins", &vocab, mc, 0),
                slots: SlotHead::new(&mut store, "ins", &vocab, mc.d_model),
            },
            Method::Kermit => Head::Kermit {
                tokens: decoders::TokenInput::new(&mut store, "kermit", &vocab, mc.d_model),
                segment: Embedding::new(&mut store, "kermit.segment", 2, mc.d_model),
                slots: SlotHead::new(&mut store, "kermit", &vocab, mc.d_model),
            },
            Method::CifNa => Head::Cif {
                alpha: Linear::new(&mut store, "cif.alpha", mc.d_model, 1),
                decoder: TokenDecoder::new(&mut store, "cif", &vocab, mc, vocab.size),
            },
            Method::Ar => Head::Ar(TokenDecoder::new(&mut store, "ar", &vocab, mc, vocab.size + 1)),
        };
        Ok(Model {
            method,
            config,
            vocab,
            feat_dim,
            store,
            encoder,
            head,
        })
    }

    /// A copy whose encoder skips posterior feedback at decode time.
    pub fn without_feedback(&self) -> Model {
        let mut m = self.clone();
        m.encoder.feedback = None;
        m
    }
}
