//! Desk-scale laboratory for transformer training mechanics: deterministic
//! tensor ops with analytic backwards, a tiny GQA/RoPE/SwiGLU decoder,
//! weighted masked instruction tuning, corpus quality gating, BPE tokenizer
//! analytics, and quantization fidelity measurement.

pub mod tensor;
pub mod nn;
pub mod model;
pub mod train;
pub mod tokenizer;
pub mod corpus;
pub mod quant;
