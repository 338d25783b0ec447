pub mod analysis;
pub mod encoder;
pub mod experiments;
pub mod inject;
pub mod retrieval;
pub mod tensor;
pub mod text;
pub mod util;
