use super::PosTag;

/// Assigns a coarse part-of-speech tag to each token.
pub trait PosTagger: Send + Sync {
    fn tag(&self, tokens: &[String]) -> Vec<PosTag>;
}

/// Lexicon plus suffix heuristics. Good enough for short imperative or
/// descriptive captions ("person opens the door", "a man is cooking").
#[derive(Clone, Debug, Default)]
pub struct RuleTagger;

const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "his", "her", "their", "its", "my", "your", "our", "some",
    "is", "are", "was", "were", "be", "been", "being", "am", "and", "or", "but", "then", "while", "of", "in", "on",
    "at", "to", "into", "onto", "from", "with", "by", "for", "up", "down", "out", "off", "over", "under", "again",
    "he", "she", "they", "it", "we", "i", "you", "him", "them", "very", "not", "no", "after", "before", "as", "another",
    "one", "two", "three", "other", "back", "away", "around",
];

const VERBS: &[&str] = &[
    "open", "opens", "close", "closes", "take", "takes", "took", "put", "puts", "hold", "holds", "sit", "sits", "sat",
    "stand", "stands", "stood", "walk", "walks", "run", "runs", "eat", "eats", "ate", "drink", "drinks", "cook",
    "cooks", "cut", "cuts", "fix", "fixes", "wash", "washes", "throw", "throws", "threw", "pour", "pours", "turn",
    "turns", "play", "plays", "watch", "watches", "look", "looks", "get", "gets", "got", "go", "goes", "went", "make",
    "makes", "made", "pick", "picks", "start", "starts", "begin", "begins", "lie", "lies", "laugh", "laughs", "smile",
    "smiles", "sneeze", "sneezes", "dress", "dresses", "tidy", "tidies", "grab", "grabs", "leave", "leaves", "left",
];

const NOUN_SUFFIXES: &[&str] = &["tion", "ment", "ness", "ity", "er", "or", "ist", "ship"];

impl RuleTagger {
    fn tag_one(word: &str) -> PosTag {
        let w = word.to_ascii_lowercase();
        if w.is_empty() || !w.chars().any(char::is_alphabetic) || FUNCTION_WORDS.contains(&w.as_str()) {
            return PosTag::Other;
        }
        if VERBS.contains(&w.as_str()) {
            return PosTag::Verb;
        }
        if w.len() > 4 && (w.ends_with("ing") || w.ends_with("ed")) {
            return PosTag::Verb;
        }
        if w.ends_with("ly") {
            return PosTag::Other;
        }
        if NOUN_SUFFIXES.iter().any(|s| w.ends_with(s)) {
            return PosTag::Noun;
        }
        PosTag::Noun
    }
}

impl PosTagger for RuleTagger {
    fn tag(&self, tokens: &[String]) -> Vec<PosTag> {
        tokens.iter().map(|t| Self::tag_one(t)).collect()
    }
}
