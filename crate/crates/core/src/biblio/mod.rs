//! Bibliometric measurement: group participation counts, deep-learning
//! keyword subsetting and normalized TF-IDF group profiles.

pub mod counting;
pub mod keywords;
pub mod records;
pub mod text;

pub use counting::{count_simple, count_total, count_weighted, paper_weights, share_series, Cell, OTHER};
pub use keywords::{default_keywords, filter_deep_learning, KeywordMatcher};
pub use records::{read_groups_json, read_records_jsonl, Author, GroupDefinition, PaperRecord};
pub use text::{preprocess_text, split_by_year, tfidf_group_scores, tfidf_profiles, TfidfProfile};
