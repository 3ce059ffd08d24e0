//! Tokenization, conversation samples, dataset files and the synthetic
//! conversation generator.

pub mod generator;
pub mod io;
pub mod prompt;
pub mod sample;
pub mod sidecar;
pub mod vocab;

pub use generator::{generate_synthetic, GeneratorSpec, TaskCounts};
pub use io::{load_dataset, save_dataset};
pub use prompt::{build_generation_prompt, build_prompt, training_rows, PromptRow, PromptTemplate};
pub use sample::{ConversationSample, Provenance, Task};
pub use vocab::Vocab;
