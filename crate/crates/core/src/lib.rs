pub mod actions;
pub mod arch;
pub mod baseline;
pub mod evaluation;
pub mod graph;
mod codec;
pub mod policy;
pub mod reinforce;
pub mod resources;
pub mod seed;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/architectures.md")]
    mod architectures {}
    #[doc = include_str!("../../../book/src/resources.md")]
    mod resources {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
