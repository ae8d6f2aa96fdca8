//! Compiles and runs the code snippets of the guide in `book/src`.

#[doc = include_str!("../../../book/src/flow.md")]
pub struct Flow;

#[doc = include_str!("../../../book/src/conditioning.md")]
pub struct Conditioning;

#[doc = include_str!("../../../book/src/generator.md")]
pub struct Generator;

#[doc = include_str!("../../../book/src/training.md")]
pub struct Training;

#[doc = include_str!("../../../book/src/evaluation.md")]
pub struct Evaluation;
