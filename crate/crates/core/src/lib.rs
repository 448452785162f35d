//! Toolkit for SQL issue debugging: sandboxed, test-case-scored evaluation
//! of SQL fixes, a ReAct-style agent whose actions are SQL statements,
//! synthetic issue generation from verified solutions, and collection of
//! successful agent trajectories for training-data export.

pub mod agent;
pub mod evaluator;
pub mod factory;
pub mod gateway;
pub mod io;
pub mod model;
pub mod par;
pub mod rewind;
pub mod sandbox;
pub mod sqltext;
pub mod stats;
pub mod value;

pub use model::{
    success_rate, validate_task, Action, Category, Dialect, EvalScript, FunctionalPlan,
    ProbeExpectation, SRReport, Step, StrategyKind, StrategyTag, SuccessRate, TaskInstance, TestCase,
    TestKind, Trajectory,
};
pub use par::Parallelism;
pub use sandbox::{ExecLimits, ExecObservation, ExecStatus, IsolationMode, Sandbox, Session};
pub use value::{Row, Value};
