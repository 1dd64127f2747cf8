pub mod tensor;
pub mod tokenizer;
pub mod corpus;
pub mod model;
pub mod trainer;
pub mod sampler;
pub mod attribution;
pub mod synthetic;
