use serde::{Deserialize, Serialize};

use super::sample::ConversationSample;
use super::vocab::{Vocab, EOS, TOUCH, TOUCH_TEXT};
use crate::error::{Error, Result};

pub const DEFAULT_TEMPLATE: &str = "[TOUCH] Q: {q} A: {a}";

/// Conversation template with one `[TOUCH]` slot, a `{q}` question slot and
/// a trailing `{a}` answer slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate {
    text: String,
}

impl TryFrom<String> for PromptTemplate {
    type Error = Error;
    fn try_from(text: String) -> Result<Self> {
        PromptTemplate::new(&text)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> String {
        t.text
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::new(DEFAULT_TEMPLATE).unwrap()
    }
}

impl PromptTemplate {
    pub fn new(text: &str) -> Result<Self> {
        let slots = text.split_whitespace().filter(|w| *w == TOUCH_TEXT).count();
        if slots != 1 {
            return Err(Error::Template(format!("expected exactly one {TOUCH_TEXT} placeholder, found {slots}")));
        }
        if text.matches("{q}").count() != 1 {
            return Err(Error::Template("expected exactly one {q} slot".into()));
        }
        if !text.trim_end().ends_with("{a}") || text.matches("{a}").count() != 1 {
            return Err(Error::Template("expected a single trailing {a} slot".into()));
        }
        Ok(PromptTemplate { text: text.into() })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Everything before the answer, with the question filled in.
    pub fn render_prefix(&self, question: &str) -> String {
        let prefix = self.text.trim_end().strip_suffix("{a}").unwrap_or(&self.text);
        prefix.replace("{q}", question)
    }

    pub fn render(&self, question: &str, answer: &str) -> String {
        format!("{} {}", self.render_prefix(question), answer)
    }
}

/// Token ids for one conversation turn, before tactile tokens are spliced in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRow {
    pub ids: Vec<u32>,
    /// Position of the `[TOUCH]` id in `ids`.
    pub touch_slot: usize,
    /// True on answer tokens (and the closing EOS).
    pub loss_mask: Vec<bool>,
}

impl PromptRow {
    /// Length once the placeholder is replaced by `patches` tactile tokens.
    pub fn expanded_len(&self, patches: usize) -> usize {
        self.ids.len() - 1 + patches
    }

    /// Text ids before and after the placeholder.
    pub fn split(&self) -> (&[u32], &[u32]) {
        (&self.ids[..self.touch_slot], &self.ids[self.touch_slot + 1..])
    }

    /// Next-token targets over the expanded sequence: position `t` predicts
    /// the token at `t + 1`, and only answer tokens count.
    pub fn targets(&self, patches: usize) -> (Vec<usize>, Vec<bool>) {
        let len = self.expanded_len(patches);
        let mut targets = vec![0usize; len];
        let mut mask = vec![false; len];
        let text_pos = |i: usize| if i < self.touch_slot { i } else { i - 1 + patches };
        for (i, (&id, &m)) in self.ids.iter().zip(&self.loss_mask).enumerate() {
            if i == self.touch_slot || !m {
                continue;
            }
            let pos = text_pos(i);
            if pos == 0 {
                continue;
            }
            targets[pos - 1] = id as usize;
            mask[pos - 1] = true;
        }
        (targets, mask)
    }
}

/// Prompt plus one answer, ready for teacher forcing.
pub fn build_prompt(
    question: &str,
    answer: &str,
    template: &PromptTemplate,
    vocab: &Vocab,
    patches: usize,
    max_seq: usize,
) -> Result<PromptRow> {
    let prefix = vocab.tokenize(&template.render_prefix(question));
    let mut answer_ids = vocab.tokenize(answer);
    answer_ids.push(EOS);
    let slots: Vec<usize> = prefix.iter().enumerate().filter(|(_, &t)| t == TOUCH).map(|(i, _)| i).collect();
    if slots.len() != 1 {
        return Err(Error::Template(format!("rendered prompt has {} placeholders", slots.len())));
    }
    let mut loss_mask = vec![false; prefix.len()];
    loss_mask.extend(std::iter::repeat_n(true, answer_ids.len()));
    let mut ids = prefix;
    ids.extend(answer_ids);
    let row = PromptRow { ids, touch_slot: slots[0], loss_mask };
    let len = row.expanded_len(patches);
    if len > max_seq {
        return Err(Error::Length { len, max: max_seq });
    }
    Ok(row)
}

/// Prompt without an answer, for generation.
pub fn build_generation_prompt(question: &str, template: &PromptTemplate, vocab: &Vocab) -> Result<PromptRow> {
    let ids = vocab.tokenize(&template.render_prefix(question));
    let slots: Vec<usize> = ids.iter().enumerate().filter(|(_, &t)| t == TOUCH).map(|(i, _)| i).collect();
    if slots.len() != 1 {
        return Err(Error::Template(format!("rendered prompt has {} placeholders", slots.len())));
    }
    let loss_mask = vec![false; ids.len()];
    Ok(PromptRow { ids, touch_slot: slots[0], loss_mask })
}

/// One training row per reference answer, all sharing the sample's clip.
pub fn training_rows(
    sample: &ConversationSample,
    template: &PromptTemplate,
    vocab: &Vocab,
    patches: usize,
    max_seq: usize,
) -> Result<Vec<PromptRow>> {
    sample
        .answers
        .iter()
        .map(|a| build_prompt(&sample.question, a, template, vocab, patches, max_seq))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["Q: A: is it rough ? very rough yes"])
    }

    #[test]
    fn mask_covers_only_answer_tokens() {
        let v = vocab();
        let t = PromptTemplate::default();
        let row = build_prompt("is it rough ?", "very rough", &t, &v, 4, 512).unwrap();
        assert_eq!(row.touch_slot, 0);
        // [TOUCH] Q: is it rough ? A: very rough EOS
        assert_eq!(row.ids.len(), 10);
        assert_eq!(row.loss_mask, vec![false, false, false, false, false, false, false, true, true, true]);
        let (targets, mask) = row.targets(4);
        assert_eq!(targets.len(), 13);
        let predicted: Vec<usize> = targets.iter().zip(&mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
        assert_eq!(predicted, vec![v.id("very").unwrap() as usize, v.id("rough").unwrap() as usize, EOS as usize]);
        // the last masked target is predicted from the second-to-last position
        assert!(mask[11] && !mask[12]);
    }

    #[test]
    fn placeholder_count_is_enforced() {
        assert!(matches!(PromptTemplate::new("Q: {q} A: {a}"), Err(Error::Template(_))));
        assert!(matches!(PromptTemplate::new("[TOUCH] [TOUCH] Q: {q} A: {a}"), Err(Error::Template(_))));
        assert!(PromptTemplate::new("Q: {q} [TOUCH] A: {a}").is_ok());
    }

    #[test]
    fn max_length_is_enforced() {
        let v = vocab();
        let t = PromptTemplate::default();
        assert!(build_prompt("is it rough ?", "yes", &t, &v, 256, 512).is_ok());
        let err = build_prompt("is it rough ?", "yes", &t, &v, 510, 512).unwrap_err();
        assert!(matches!(err, Error::Length { max: 512, .. }));
    }

    #[test]
    fn placeholder_in_the_middle_shifts_targets() {
        let v = vocab();
        let t = PromptTemplate::new("Q: {q} [TOUCH] A: {a}").unwrap();
        let row = build_prompt("is it rough ?", "yes", &t, &v, 2, 512).unwrap();
        assert_eq!(row.touch_slot, 5);
        let (targets, mask) = row.targets(2);
        let hits: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        // Q: is it rough ? | t t | A: yes EOS  ->  yes at 8, EOS at 9
        assert_eq!(hits, vec![7, 8]);
        assert_eq!(targets[7], v.id("yes").unwrap() as usize);
    }
}
