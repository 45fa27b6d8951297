//! The in-guest agent: serves protocol requests against an execution root.

mod command;
mod gui;
mod root;
mod serve;

pub use command::{run_command, OUTPUT_CAP};
pub use gui::{perform_gui, GuiSurface, InputEvent, Observation, RetryPolicy, ScriptedScreen};
pub use root::{normalize_lexically, ExecutionRoot, Mode, RootError};
pub use serve::{serve_tcp, spawn_local, Agent, LocalAgent, ServeExit};
