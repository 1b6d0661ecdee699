//! Synthetic RGB-D scenes, instructions, the GLG1 container and evaluation
//! exchange files.

pub mod container;
pub mod exchange;
pub mod language;
pub mod scene;

pub use container::{read_checkpoint, read_dataset, write_checkpoint, write_container, write_dataset, ContainerReader, Manifest, MaskRecord, NamedTensor};
pub use language::{Vocab, MAX_TOKENS, PAD_ID};
pub use scene::{generate_dataset, generate_scene, gt_grasps_for, Difficulty, ObjectRecord, SceneConfig, SceneSample};
