//! The single render path shared by the command line and the HTTP service,
//! so both produce byte-identical WAV output for identical inputs.

use thiserror::Error;

use crate::audio::{encode_wav, AudioBuffer, AudioError, SampleFormat};
use crate::model::{ConditioningVector, ModelError, TcnModel};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Process `input` under conditioning `c` and encode the result as a
/// float32 WAV byte stream.
pub fn render_wav(model: &TcnModel<f32>, input: &AudioBuffer, c: &[f32]) -> Result<Vec<u8>, RenderError> {
    let c = ConditioningVector::new(c.to_vec())?;
    if c.len() != model.config.cond_dim {
        return Err(ModelError::ConditioningDim {
            expected: model.config.cond_dim,
            found: c.len(),
        }
        .into());
    }
    let out = model.render(input, &c)?;
    Ok(encode_wav(&out, SampleFormat::Float32)?.0)
}
