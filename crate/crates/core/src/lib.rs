pub mod corpus;
pub mod eval;
pub mod lstmp;
pub mod math;
pub mod networks;
pub mod training;
pub mod viz;
pub mod experiment;
