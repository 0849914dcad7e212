#![allow(dead_code)]

pub mod algebra;
pub mod gradcheck;
