//! Tiny autoregressive policy with top-k routed mixture-of-experts blocks.
//!
//! Architecture: token + position embedding, a causal mean-pool context
//! mixer over relu features, `num_layers` residual MoE blocks and an output
//! projection. A routing override replays recorded expert sets.

mod checkpoint;
mod forward;
mod params;
mod routing;
mod sampling;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use forward::{
    evaluate_response, forward_rows, log_softmax, next_token_log_probs, policy_forward_logits,
    score_response, sequence_logprob, ForwardOutput, GateReplay, ResponseEval, RoutingOverride,
    ScoredResponse, Token, EOS,
};
pub use params::{BoundLayer, BoundParams, ExpertParams, MoeLayerParams, PolicyConfig, PolicyParams};
pub use routing::{route_topk, LayerRoute, PositionRoute, RoutingTrace};
pub use sampling::sample_token;
