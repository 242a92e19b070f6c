#![allow(dead_code)]

pub mod attention;
pub mod gradcheck;
pub mod model;
pub mod primitives;
pub mod scan;
pub mod sift;
