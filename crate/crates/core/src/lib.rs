pub mod autodiff;
pub mod gradcheck;
pub mod par;
pub mod dsp;
pub mod model;
pub mod taskgen;
pub mod trainer;
pub mod evalcli;
