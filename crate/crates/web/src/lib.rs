//! Browser bindings for the demo page in `www/`.

use cgmatch::confidence::{self, ConfidenceVariant};
use cgmatch::eval::{self, CorpusPair, CorpusSpec, WarpKind, MMA_THRESHOLDS};
use cgmatch::features::l2_normalize_channels;
use cgmatch::{ops, Matcher, RunConfig};
use wasm_bindgen::prelude::*;

fn js_err(e: cgmatch::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Softmax of `tau * logits`.
#[wasm_bindgen(js_name = temperedSoftmax)]
pub fn tempered_softmax(logits: Vec<f64>, tau: f64) -> Vec<f64> {
    ops::tempered_softmax(&logits, tau)
}

/// A synthetic image pair plus the pipeline settings applied to it.
#[wasm_bindgen]
pub struct Demo {
    pair: CorpusPair,
    config: RunConfig,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize, magnitude: f64) -> Result<Demo, JsError> {
        let spec = CorpusSpec {
            seed,
            pairs: 1,
            size,
            warp: WarpKind::Random { magnitude },
            noise: 0.02,
        };
        // Smaller channel counts keep the page responsive.
        let config = RunConfig {
            coarse_channels: 64,
            fine_channels: 32,
            ..RunConfig::default()
        };
        Ok(Demo {
            pair: eval::synthesize_pair(&spec, 0).map_err(js_err)?,
            config,
        })
    }

    pub fn size(&self) -> usize {
        self.pair.image1.width()
    }

    /// Gray levels of image 1 (`which == 1`) or image 2, row-major bytes.
    pub fn pixels(&self, which: u8) -> Vec<u8> {
        let img = if which == 1 { &self.pair.image1 } else { &self.pair.image2 };
        cgmatch::pgm::quantize(img.data())
    }

    #[wasm_bindgen(js_name = setFlags)]
    pub fn set_flags(&mut self, bias: bool, rescale: bool, eta: f64) {
        self.config.ablation.bias = bias;
        self.config.ablation.rescale = rescale;
        self.config.eta = eta;
    }

    /// Both confidence maps, concatenated, for correlation temperature
    /// `gamma` and variant `i`..`v`.
    pub fn confidence(&self, gamma: f64, variant: &str) -> Result<Vec<f64>, JsError> {
        let variant = ConfidenceVariant::parse_with_gamma(variant, gamma).map_err(js_err)?;
        let backbone = cgmatch::features::Backbone::new(self.config.backbone()).map_err(js_err)?;
        let f1 = backbone.extract(&self.pair.image1).map_err(js_err)?;
        let f2 = backbone.extract(&self.pair.image2).map_err(js_err)?;
        let corr = confidence::correlation(
            &l2_normalize_channels(&f1.coarse),
            &l2_normalize_channels(&f2.coarse),
            gamma,
        )
        .map_err(js_err)?;
        let (w1, w2) = confidence::confidence_maps(&corr, variant);
        Ok(w1.values.into_iter().chain(w2.values).collect())
    }

    /// Fine matches as flat `[x1, y1, x2, y2, reprojection_error]` records
    /// followed by the four MMA values.
    #[wasm_bindgen(js_name = matchPair)]
    pub fn match_pair(&self) -> Result<Vec<f64>, JsError> {
        let matcher = Matcher::new(self.config.clone()).map_err(js_err)?;
        let matches = matcher.match_pair(&self.pair.image1, &self.pair.image2).map_err(js_err)?;
        let errors = eval::reprojection_errors(&matches.fine, &self.pair.h);
        let mut out = Vec::with_capacity(5 * matches.fine.len() + MMA_THRESHOLDS.len());
        for (m, e) in matches.fine.iter().zip(&errors) {
            out.extend([m.point1.x, m.point1.y, m.point2.x, m.point2.y, *e]);
        }
        out.extend(eval::mma(&matches.fine, &self.pair.h, &MMA_THRESHOLDS).accuracy);
        Ok(out)
    }
}
