//! Closed-loop evaluation: world stepping, scripted expert, rollouts and
//! reports.

pub mod expert;
pub mod idm;
pub mod report;
pub mod rollout;
pub mod world;
