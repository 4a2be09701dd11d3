#![allow(dead_code)]

use rrr_core::train::TokenPair;
use rrr_core::Vocab;

/// Twenty distinct (question, rewrite) pairs over a small vocabulary.
pub const TOY_PAIRS: [(&str, &str); 20] = [
    ("who directed the film jaws", "jaws film director"),
    ("when was the eiffel tower built", "eiffel tower construction year"),
    ("what is the capital of peru", "peru capital city"),
    ("who wrote the novel dracula", "dracula novel author"),
    ("how tall is mount everest", "mount everest height"),
    ("which river flows through cairo", "river cairo"),
    ("who painted the mona lisa", "mona lisa painter"),
    ("what language is spoken in brazil", "brazil official language"),
    ("when did the titanic sink", "titanic sinking date"),
    ("who founded the company tesla", "tesla founder"),
    ("what is the largest planet", "largest planet solar system"),
    ("who composed the moonlight sonata", "moonlight sonata composer"),
    ("where was napoleon born", "napoleon birthplace"),
    ("what currency does japan use", "japan currency"),
    ("who invented the telephone", "telephone inventor"),
    ("how long is the nile river", "nile river length"),
    ("which country hosted the 2016 olympics", "2016 olympics host country"),
    ("what is the boiling point of water", "water boiling point"),
    ("who discovered penicillin", "penicillin discovery"),
    ("what is the population of canada", "canada population"),
];

pub fn toy_vocab() -> Vocab {
    Vocab::build(TOY_PAIRS.iter().flat_map(|(q, r)| [*q, *r]))
}

pub fn toy_pairs(vocab: &Vocab) -> Vec<TokenPair> {
    TOY_PAIRS
        .iter()
        .map(|(q, r)| TokenPair { question: vocab.encode(q), rewrite: vocab.encode_target(r) })
        .collect()
}
