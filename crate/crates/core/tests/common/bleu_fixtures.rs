//! Hand-checked BLEU cases.

/// (candidate, reference, clipped matches per order, candidate n-gram
/// totals per order, unsmoothed BLEU, smoothed BLEU). The scores come from
/// `100 * bp * exp(mean(log p_n))` evaluated by hand from the counts.
pub type Fixture = (&'static str, &'static str, [usize; 4], [usize; 4], f64, f64);

pub const FIXTURES: [Fixture; 10] = [
    (
        "the cat sat",
        "the cat sat down",
        [3, 2, 1, 0],
        [3, 2, 1, 0],
        0.0,
        71.65313105737893,
    ),
    (
        "a b c d",
        "a b c d",
        [4, 3, 2, 1],
        [4, 3, 2, 1],
        100.0,
        100.0,
    ),
    (
        "a b c d e f",
        "a b c d e g",
        [5, 4, 3, 2],
        [6, 5, 4, 3],
        75.98356856515926,
        75.98356856515926,
    ),
    (
        "x y z",
        "a b c",
        [0, 0, 0, 0],
        [3, 2, 1, 0],
        0.0,
        45.18010018049224,
    ),
    (
        "the the the the",
        "the cat",
        [1, 0, 0, 0],
        [4, 3, 2, 1],
        0.0,
        31.94715521231363,
    ),
    (
        "one two three four five",
        "one two three four",
        [4, 3, 2, 1],
        [5, 4, 3, 2],
        66.8740304976422,
        66.8740304976422,
    ),
    (
        "a b a b a b",
        "a b a b",
        [4, 3, 2, 1],
        [6, 5, 4, 3],
        50.813274815461476,
        50.813274815461476,
    ),
    (
        "p q r s t u v",
        "p q r x t u v",
        [6, 4, 2, 0],
        [7, 6, 5, 4],
        0.0,
        46.239484591627914,
    ),
    (
        "m n",
        "m n o p q r",
        [2, 1, 0, 0],
        [2, 1, 0, 0],
        0.0,
        13.53352832366127,
    ),
    (
        "a b c d e",
        "e d c b a",
        [5, 0, 0, 0],
        [5, 4, 3, 2],
        0.0,
        35.93041119630843,
    ),
];
