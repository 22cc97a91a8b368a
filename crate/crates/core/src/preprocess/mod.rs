//! Flow computation, magnification, and landmark-guided token gathering.

pub mod flow;
pub mod frame;
pub mod tokens;

pub use flow::{compute_flow, magnify_flow, render_flow_image, FlowEstimator, FlowField, FlowImage, LucasKanade};
pub use frame::Frame;
pub use tokens::{au_token_indices, gather_au_tokens, map_landmark_to_token, AuTokenGroups, Landmarks};
