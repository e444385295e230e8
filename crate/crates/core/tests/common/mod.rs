//! Shared fixtures.
#![allow(dead_code, unused_imports)]

use std::collections::BTreeSet;

use ctxbp::constraints::Constraints;
use ctxbp::corpus::{Corpus, CountTable};

pub use ctxbp::oracle::{
    tiny_corpus as random_corpus, tiny_instance as random_instance, TinyInstance as Instance,
};

pub const INTEGER_EXAMPLE: &str =
    "10* 0 1 2 4\n10* 0 1 3 5\n1* 0 1 3 4\n1000* 6 2 5\n1000* 6 3 4\n";

pub fn integer_example() -> (Corpus, CountTable, Constraints) {
    let corpus = Corpus::parse(INTEGER_EXAMPLE).unwrap();
    let counts = CountTable::from_corpus(&corpus, 2).unwrap();
    let mut c = Constraints::unconstrained(2, counts.alphabet());
    c.mask.restrict(1, &BTreeSet::from([4])).unwrap();
    (corpus, counts, c)
}
