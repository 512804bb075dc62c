//! Balanced prompt planning and resumable synthetic driving-scene image
//! generation.
//!
//! The pipeline, end to end:
//!
//! 1. [`label_stats`] — scan reference label maps (or load counts) into the
//!    thing-class share distribution `E_i`.
//! 2. [`sampling`] — invert shares into draw probabilities
//!    `P_i = (1/E_i) / sum_j (1/E_j)` and build a deterministic plan that
//!    balances items over the weather x time grid.
//! 3. [`prompts`] — compose `A photo of {identifier} {scene_noun}, {class},
//!    {weather}, {time}` and enrich it with concrete weather/lighting
//!    detail (text backend or offline descriptor bank).
//! 4. [`orchestrator`] + [`backend`] — send each prompt to an image
//!    backend with retries, bounded concurrency, atomic writes, and
//!    crash-safe resume.
//! 5. [`manifest`] — the append-only record of every attempt, and the
//!    realized-vs-planned conformance report.

pub mod backend;
pub mod cli;
pub mod digest;
pub mod label_stats;
pub mod manifest;
pub mod orchestrator;
pub mod prompts;
pub mod sampling;
pub mod seed;

pub use backend::{ImageBackend, ImageBackendSpec, ImageRequest, MockImageBackend};
pub use label_stats::{ClassConfig, ClassDistribution, PixelCounts};
pub use manifest::{DistributionReport, ManifestEntry};
pub use orchestrator::{run, RunOptions, RunReport};
pub use prompts::{compose_scene, Enricher, PromptSpec, PromptTemplate};
pub use sampling::{make_plan, sampling_probabilities, ConditionGrid, GenerationPlan, SamplingTable};
