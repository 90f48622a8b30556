pub mod setcalc;
pub mod qp;
pub mod platoon;
pub mod lifting;
pub mod reach;
pub mod control;
pub mod harness;
