pub mod autodiff;
pub mod cli;
pub mod experiments;
pub mod gaze_io;
pub mod gbt;
pub mod model;
pub mod preprocess;
pub mod seed;
pub mod training;
