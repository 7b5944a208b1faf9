pub mod autograd;
pub mod cli;
pub mod data;
pub mod networks;
pub mod ranking;
pub mod selection;
pub mod training;
