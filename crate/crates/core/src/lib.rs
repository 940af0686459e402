pub mod error;
pub mod matkit;
pub mod sdp;
pub mod lmi;
pub mod qmi;
pub mod datagen;
pub mod informativity;
pub mod verify;
