//! Synthetic classification tasks, corruption operators and stream protocols.

mod corrupt;
mod io;
mod protocol;
mod task;

pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC};
pub use protocol::{build_protocol, preset_15, ResetPolicy, StreamProtocol};
pub use task::{make_source_task, make_source_task_with, Dataset, DatasetMeta, TaskSpec};
