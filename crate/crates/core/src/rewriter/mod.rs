//! Trainable rewriter: a per-tuple Bernoulli mask policy with exact rewrite
//! probabilities, plus an optional bridge to an external text generator.

pub mod external;
pub mod policy;

pub use external::{delta_weights, external_generate, EndpointConfig, GeneratedRewrite, GenerateRequest, GenerateResponse};
pub use policy::{
    mask_logprob, mle_finetune, mle_loss_and_gradient, rewrite_logprob, sample_prepared, sample_rewrites, tuple_contexts,
    tuple_logit, MaskExample, MleConfig, ParamRef, PolicyGradient, PreparedEhr, RewriterPolicy, TupleContext,
    CONTEXT_DIM,
};
