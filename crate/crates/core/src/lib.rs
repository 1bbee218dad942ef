//! Neuro-symbolic learning of cardinality constraints.
//!
//! A perception network and a relaxed constraint matrix are trained together:
//! proximal-point updates for the constraints, closed-form symbol grounding,
//! SGD for the network, and a concave penalty that is annealed until every
//! relaxed quantity is Boolean. Learned systems are solved exactly by a native
//! branch-and-bound reasoner and can be exported as OPB or SMT-LIB2.

pub mod constraints;
pub mod dcopt;
pub mod grounding;
pub mod learner;
pub mod numkit;
pub mod perception;
pub mod reasoner;
pub mod tasks;
pub mod trainer;
