pub mod attacks;
pub mod codec;
pub mod controllers;
pub mod messages;
pub mod netsim;
pub mod scenario;
pub mod securechannel;
pub mod wire;
