//! LAPACK provider selection. Only OpenBLAS is wired up; it bundles the
//! LAPACK routines, so linking it is all this crate does.
#![no_std]

#[cfg(feature = "openblas")]
extern crate openblas_src as _;
