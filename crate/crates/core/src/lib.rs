pub mod eval;
pub mod index;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod persist;
pub mod pipeline;
pub mod robust;
pub mod synthetic;
pub mod text;
pub mod trainer;
pub mod verify;
