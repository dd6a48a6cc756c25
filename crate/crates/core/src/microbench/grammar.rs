//! Text templates of the micro world. Every string is space-separated words
//! from [`Vocab`](super::vocab::Vocab).

use super::world::{ATTRIBUTE_KINDS, ATTRIBUTE_VALUES, CONTEXTS};

pub const FALLBACK_QUERY: &str = "can you describe <sks> ?";

pub fn attribute_question(kind: &str) -> String {
    format!("what is <sks> 's {kind} ?")
}

pub fn attribute_answer(kind: &str, value: &str) -> String {
    format!("<sks> 's {kind} is {value} .")
}

pub fn class_question() -> String {
    "what is <sks> ?".into()
}

pub fn class_answer(class: &str) -> String {
    format!("<sks> is a {class} .")
}

pub fn where_question() -> String {
    "where is <sks> ?".into()
}

pub fn where_answer(ctx: &str) -> String {
    format!("<sks> is at the {ctx} .")
}

pub fn recognition_question() -> String {
    "is <sks> in the photo ?".into()
}

pub fn recognition_answer(present: bool) -> String {
    if present { "yes ." } else { "no ." }.into()
}

/// `verb <sks> [with v1 and v2 …] [at the ctx]`
pub fn generation_prompt(verb: &str, values: &[&str], ctx: Option<&str>) -> String {
    let mut s = format!("{verb} <sks>");
    for (i, v) in values.iter().enumerate() {
        s.push_str(if i == 0 { " with " } else { " and " });
        s.push_str(v);
    }
    if let Some(c) = ctx {
        s.push_str(" at the ");
        s.push_str(c);
    }
    s
}

/// Request that names an attribute kind but not its value.
pub fn parg_prompt(verb: &str, kind: &str, ctx: Option<&str>) -> String {
    let mut s = format!("{verb} <sks> with their {kind}");
    if let Some(c) = ctx {
        s.push_str(" at the ");
        s.push_str(c);
    }
    s
}

pub fn exemplar(request: &str, query: &str) -> String {
    format!("request {request} query {query}")
}

pub fn parse_prompt(request: &str) -> String {
    format!("request {request} query")
}

pub fn compose_prompt(answer: &str, request: &str) -> String {
    format!("answer {answer} request {request} prompt")
}

pub fn unified_prompt(request: &str) -> String {
    format!("request {request} plan")
}

pub fn unified_output(query: &str, answer: &str, refined: &str) -> String {
    format!("query {query} answer {answer} prompt {refined}")
}

pub fn removal_instruction(class: &str) -> String {
    format!("remove <sks> : {class} from the photo")
}

pub fn attribute_instruction(kind: &str, value: &str) -> String {
    format!("change <sks> 's {kind} to {value}")
}

pub fn spatial_instruction() -> String {
    "flip the photo".into()
}

pub fn environment_instruction(ctx: &str) -> String {
    format!("move <sks> to the {ctx}")
}

pub fn style_instruction() -> String {
    "turn the photo into a sketch".into()
}

/// The query the parser should produce for `request`.
pub fn expected_query(request: &str) -> String {
    match requested_kinds(request).first() {
        Some(k) => attribute_question(k),
        None => FALLBACK_QUERY.into(),
    }
}

/// Attribute kinds referenced as `their <kind>`.
pub fn requested_kinds(request: &str) -> Vec<&'static str> {
    let words: Vec<&str> = request.split_whitespace().collect();
    words
        .windows(2)
        .filter(|w| w[0] == "their")
        .filter_map(|w| ATTRIBUTE_KINDS.iter().find(|k| **k == w[1]).copied())
        .collect()
}

/// Attribute values literally present in `text`.
pub fn mentioned_values(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for w in text.split_whitespace() {
        for (k, vals) in ATTRIBUTE_VALUES.iter().enumerate() {
            if let Some(v) = vals.iter().position(|x| *x == w) {
                out.push((k, v));
            }
        }
    }
    out
}

pub fn mentioned_context(text: &str) -> Option<usize> {
    let words: Vec<&str> = text.split_whitespace().collect();
    words
        .windows(3)
        .find(|w| w[0] == "at" && w[1] == "the")
        .and_then(|w| CONTEXTS.iter().position(|c| *c == w[2]))
}

/// Parsed form of a question.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Query {
    Attribute(&'static str),
    Describe,
    Class,
}

pub fn parse_query(q: &str) -> Option<Query> {
    let q = q.trim();
    if q == FALLBACK_QUERY {
        return Some(Query::Describe);
    }
    if q == class_question() {
        return Some(Query::Class);
    }
    ATTRIBUTE_KINDS
        .iter()
        .find(|k| attribute_question(k) == q)
        .map(|k| Query::Attribute(k))
}

/// Value stated by an answer of the form `<sks> 's kind is value .`.
pub fn answer_value(answer: &str, kind: &str) -> Option<&'static str> {
    let k = ATTRIBUTE_KINDS.iter().position(|x| *x == kind)?;
    let words: Vec<&str> = answer.split_whitespace().collect();
    let at = words.iter().position(|w| *w == "is")?;
    let v = words.get(at + 1)?;
    ATTRIBUTE_VALUES[k].iter().find(|x| *x == v).copied()
}

/// Split a unified output into its query, answer and prompt fields.
pub fn split_unified(text: &str) -> Option<(String, String, String)> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let qi = words.iter().position(|w| *w == "query")?;
    let ai = words.iter().position(|w| *w == "answer")?;
    let pi = words.iter().position(|w| *w == "prompt")?;
    if !(qi < ai && ai < pi) {
        return None;
    }
    let join = |a: usize, b: usize| words[a..b].join(" ");
    Some((join(qi + 1, ai), join(ai + 1, pi), join(pi + 1, words.len())))
}

/// The six fixed parser demonstrations, in the order they are prepended.
pub fn fixed_exemplars() -> Vec<(String, String)> {
    let reqs = [
        parg_prompt("generate", "toy", None),
        parg_prompt("draw", "home", Some("park")),
        parg_prompt("show", "snack", None),
        generation_prompt("create", &[], Some("beach")),
        parg_prompt("generate", "snack", Some("snow")),
        parg_prompt("draw", "toy", Some("garden")),
    ];
    reqs.iter().map(|r| (r.clone(), expected_query(r))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microbench::vocab::Vocab;

    #[test]
    fn templates_use_only_vocabulary_words() {
        let v = Vocab::standard();
        let texts = [
            attribute_answer("toy", "excavator"),
            class_answer("dog"),
            where_answer("beach"),
            generation_prompt("draw", &["kite", "farm"], Some("snow")),
            parg_prompt("show", "home", Some("park")),
            compose_prompt(&attribute_answer("toy", "ball"), &parg_prompt("generate", "toy", None)),
            unified_output(FALLBACK_QUERY, &class_answer("cat"), "generate <sks>"),
            removal_instruction("dog"),
            attribute_instruction("snack", "candy"),
            environment_instruction("street"),
            style_instruction(),
            spatial_instruction(),
        ];
        for t in texts {
            v.encode(&t).unwrap();
        }
    }

    #[test]
    fn query_parsing() {
        let req = parg_prompt("generate", "home", Some("beach"));
        assert_eq!(requested_kinds(&req), vec!["home"]);
        assert_eq!(expected_query(&req), "what is <sks> 's home ?");
        assert_eq!(expected_query("generate <sks>"), FALLBACK_QUERY);
        assert_eq!(parse_query(&expected_query(&req)), Some(Query::Attribute("home")));
        assert_eq!(parse_query("what is ?"), None);
        assert_eq!(answer_value(&attribute_answer("toy", "robot"), "toy"), Some("robot"));
        assert_eq!(answer_value("<sks> is a dog .", "toy"), None);
    }

    #[test]
    fn unified_round_trip() {
        let out = unified_output("what is <sks> 's toy ?", "<sks> 's toy is kite .", "generate <sks> with kite");
        let (q, a, p) = split_unified(&out).unwrap();
        assert_eq!(q, "what is <sks> 's toy ?");
        assert_eq!(a, "<sks> 's toy is kite .");
        assert_eq!(p, "generate <sks> with kite");
        assert!(split_unified("answer x query y").is_none());
    }

    #[test]
    fn prompt_helpers() {
        let p = generation_prompt("generate", &["kite"], Some("park"));
        assert_eq!(mentioned_values(&p), vec![(0, 3)]);
        assert_eq!(mentioned_context(&p), Some(1));
        assert_eq!(fixed_exemplars().len(), 6);
    }
}
