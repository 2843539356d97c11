//! Differentiable primitives, a small gradient tape, Adam, and a
//! finite-difference gradient checker.

pub mod adam;
pub mod attention;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use attention::{attention_block, attention_block_with, block_forward, BlockOptions, BlockParams, BlockVars};
pub use gradcheck::{finite_diff_check, finite_diff_check_with, numeric_gradient, numeric_gradient_with, relative_error, Stencil, DEFAULT_FD_EPS};
pub use ops::{cosine, gelu, gelu_with, layer_norm, softmax, GeluKind, LN_EPS};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;

/// Arithmetic precision a run is carried out in.
///
/// All math is computed in `f64`. In `Run` mode trainable parameters and
/// fused inputs are rounded through `f32` after every update, which is what
/// the on-disk formats store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Test,
    Run,
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "test" => Ok(Precision::Test),
            "run" => Ok(Precision::Run),
            other => Err(crate::Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}
