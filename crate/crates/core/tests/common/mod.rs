#![allow(dead_code)]

pub mod correspondence;
pub mod gradcheck;
pub mod selection;
