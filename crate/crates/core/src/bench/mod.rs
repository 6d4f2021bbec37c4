//! Synthetic paired restoration data.

pub mod dataset;
pub mod degrade;
pub mod scenes;

pub use dataset::{generate_pair, generate_split, load_dataset, make_dataset, Dataset, DatasetConfig, Manifest, RestorationPair, Split};
pub use degrade::{degrade, Task};
pub use scenes::{FolderScenes, ProceduralScenes, SceneSource};
