use super::{SlotSpan, Utterance};
use crate::error::{Error, Result};

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str, position: usize) -> Result<Tag<'_>> {
    let bad = |reason: &str| Error::IllFormedBio {
        position,
        reason: format!("{reason}: `{tag}`"),
    };
    if tag == "O" {
        return Ok(Tag::Outside);
    }
    let (prefix, slot_type) = tag.split_at(tag.len().min(2));
    if slot_type.is_empty() {
        return Err(bad("tag without slot type"));
    }
    match prefix {
        "B-" => Ok(Tag::Begin(slot_type)),
        "I-" => Ok(Tag::Inside(slot_type)),
        _ => Err(bad("unrecognized tag")),
    }
}

/// Renders the utterance's spans as one BIO tag per token.
pub fn spans_to_bio(utterance: &Utterance) -> Vec<String> {
    let mut tags = vec!["O".to_string(); utterance.len()];
    for span in &utterance.spans {
        tags[span.start] = format!("B-{}", span.slot_type);
        for tag in &mut tags[span.start + 1..span.end] {
            *tag = format!("I-{}", span.slot_type);
        }
    }
    tags
}

/// Decodes a BIO tag sequence into spans. `I-x` must continue a `B-x` or
/// `I-x`; anything else is rejected with its position.
pub fn bio_to_spans<S: AsRef<str>>(tags: &[S]) -> Result<Vec<SlotSpan>> {
    let mut spans = Vec::new();
    let mut open: Option<SlotSpan> = None;
    for (position, tag) in tags.iter().enumerate() {
        match parse_tag(tag.as_ref(), position)? {
            Tag::Outside => spans.extend(open.take()),
            Tag::Begin(slot_type) => {
                spans.extend(open.take());
                open = Some(SlotSpan::new(position, position + 1, slot_type));
            }
            Tag::Inside(slot_type) => match open.as_mut() {
                Some(span) if span.slot_type == slot_type => span.end = position + 1,
                Some(span) => {
                    return Err(Error::IllFormedBio {
                        position,
                        reason: format!("I-{slot_type} continues a {} span", span.slot_type),
                    })
                }
                None => {
                    return Err(Error::IllFormedBio {
                        position,
                        reason: format!("I-{slot_type} without a preceding B-{slot_type}"),
                    })
                }
            },
        }
    }
    spans.extend(open);
    Ok(spans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utterance(n: usize, spans: Vec<SlotSpan>) -> Utterance {
        let tokens = (0..n).map(|i| format!("w{i}")).collect();
        Utterance::new("u", tokens, "D", spans).unwrap()
    }

    #[test]
    fn renders_fixture_tags() {
        let u = utterance(4, vec![SlotSpan::new(2, 3, "object type"), SlotSpan::new(3, 4, "object name")]);
        assert_eq!(spans_to_bio(&u), ["O", "O", "B-object type", "B-object name"]);
        assert_eq!(spans_to_bio(&utterance(3, vec![])), ["O", "O", "O"]);
        let u = utterance(3, vec![SlotSpan::new(0, 2, "artist")]);
        assert_eq!(spans_to_bio(&u), ["B-artist", "I-artist", "O"]);
    }

    #[test]
    fn decodes_fixture_tags() {
        assert_eq!(
            bio_to_spans(&["O", "O", "B-object type", "B-object name"]).unwrap(),
            vec![SlotSpan::new(2, 3, "object type"), SlotSpan::new(3, 4, "object name")]
        );
        assert_eq!(
            bio_to_spans(&["B-artist", "I-artist", "O"]).unwrap(),
            vec![SlotSpan::new(0, 2, "artist")]
        );
    }

    #[test]
    fn rejects_bad_sequences_with_position() {
        let pos = |tags: &[&str]| match bio_to_spans(tags) {
            Err(Error::IllFormedBio { position, .. }) => position,
            other => panic!("expected error, got {other:?}"),
        };
        assert_eq!(pos(&["I-artist"]), 0);
        assert_eq!(pos(&["O", "O", "I-artist"]), 2);
        assert_eq!(pos(&["B-artist", "I-playlist"]), 1);
        assert_eq!(pos(&["O", "X-artist"]), 1);
        assert_eq!(pos(&["B-"]), 0);
    }

    // Random layouts: walk left to right, either skip a token or open a span
    // of length 1..=3 with one of a few types.
    fn layout() -> impl Strategy<Value = (usize, Vec<SlotSpan>)> {
        proptest::collection::vec((0u8..3, 1usize..4, 0usize..4), 1..12).prop_map(|steps| {
            let names = ["artist", "object type", "playlist", "city"];
            let mut pos = 0;
            let mut spans = Vec::new();
            for (kind, len, ty) in steps {
                if kind == 0 {
                    pos += 1;
                } else {
                    spans.push(SlotSpan::new(pos, pos + len, names[ty]));
                    pos += len;
                }
            }
            (pos.max(1), spans)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn bio_round_trip((n, spans) in layout()) {
            let u = utterance(n, spans);
            let tags = spans_to_bio(&u);
            prop_assert_eq!(tags.len(), n);
            prop_assert_eq!(bio_to_spans(&tags).unwrap(), u.spans);
        }
    }
}
