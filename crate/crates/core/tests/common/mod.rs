//! Fixtures and independent oracles shared by integration tests.
#![allow(dead_code)]

pub mod encoder_oracle;
pub mod quadrature;
