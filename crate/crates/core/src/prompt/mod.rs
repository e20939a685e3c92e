pub mod bank;
pub mod inject;
pub mod layout;

pub use bank::PromptBank;
pub use inject::{compose_embeddings, inject, MaskedInput, Slot};
pub use layout::{build_layout, LayoutSpec, PromptPosition, TemplateLayout};
