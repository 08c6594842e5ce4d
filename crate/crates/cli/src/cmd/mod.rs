pub mod align;
pub mod artifacts;
pub mod stats;
pub mod texture;
pub mod toy;
