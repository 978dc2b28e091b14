//! Decoding and evaluation: beam search, corpus BLEU, the best-window
//! protocol over evaluation series, and symbolic parameter/FLOP accounting.

mod beam;
mod bleu;
mod count;
mod window;

pub use beam::{beam_search, greedy_decode, BeamResult, Hypothesis, StepDecoder};
pub use bleu::{bleu, bleu_lines, BleuOptions};
pub use count::{count_flops, count_params, matmul_flops, FlopReport, COUNT_CONVENTIONS, FLOP_CONVENTIONS};
pub use window::{best_eval_window, best_window_over, EvalPoint, EvalSeries, WindowReport};
