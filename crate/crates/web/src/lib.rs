//! wasm-bindgen surface for `www/index.html`.

pub mod demo;

use wasm_bindgen::prelude::*;

use demo::{Rendered, VoiceParams};

fn js(e: unet_tts::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Rendering {
    inner: Rendered,
}

#[wasm_bindgen]
impl Rendering {
    pub fn frames(&self) -> usize {
        self.inner.mel.frames()
    }

    pub fn n_mels(&self) -> usize {
        self.inner.mel.n_mels
    }

    /// Row-major `frames x n_mels` log-mel values.
    pub fn data(&self) -> Vec<f64> {
        self.inner.mel.data.iter().copied().collect()
    }

    pub fn durations(&self) -> Vec<u32> {
        self.inner.durations.iter().map(|&d| d as u32).collect()
    }

    /// The F0 the renderer used, per frame (0 in unvoiced frames).
    pub fn f0_truth(&self) -> Vec<f64> {
        self.inner.f0_truth.clone()
    }
}

#[wasm_bindgen]
pub struct Studio {
    inner: demo::Demo,
}

#[wasm_bindgen]
impl Studio {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<Studio, JsError> {
        Ok(Studio {
            inner: demo::Demo::new(demo::DEFAULT_INVENTORY_SEED).map_err(js)?,
        })
    }

    /// Space-separated phoneme symbols.
    pub fn symbols(&self) -> String {
        self.inner.symbols().join(" ")
    }

    #[allow(clippy::too_many_arguments)]
    pub fn render(
        &self,
        text: &str,
        f0_base: f64,
        spectral_tilt: f64,
        formant_shift: f64,
        rate_scale: f64,
        style: &str,
        seed: u32,
    ) -> Result<Rendering, JsError> {
        let voice = VoiceParams {
            f0_base,
            spectral_tilt,
            formant_shift,
            rate_scale,
        };
        let inner = self.inner.render(text, voice, style, u64::from(seed)).map_err(js)?;
        Ok(Rendering { inner })
    }

    pub fn track_f0(&self, r: &Rendering) -> Vec<f64> {
        self.inner.track_f0(&r.inner.mel)
    }

    pub fn mcd(&self, a: &Rendering, b: &Rendering) -> Result<f64, JsError> {
        demo::mcd(&a.inner.mel, &b.inner.mel).map_err(js)
    }
}
