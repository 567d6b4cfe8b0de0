pub mod layers;
pub mod params;

pub use layers::{FrameMask, Linear, Padding};
pub use params::{Init, ParamStore, Scope};
