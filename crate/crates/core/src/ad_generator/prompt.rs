//! Character-bank prompt rendering.

use serde::{Deserialize, Serialize};

use super::GeneratorError;
use crate::character_bank::CharacterEntry;
use crate::vocab::split_words;

pub const CONTEXT_BUDGET: usize = 32;
pub const CHAR_BUDGET: usize = 64;
pub const DESCRIBE_CUE: &str = "Describe <video>:";
pub const CHAR_HEADER: &str = "possible characters:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    NamesOnly,
    NamesActors,
    NamesActorsImages,
}

impl Template {
    /// Template number 1-3; anything else means no character prompt.
    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            1 => Some(Template::NamesOnly),
            2 => Some(Template::NamesActors),
            3 => Some(Template::NamesActorsImages),
            _ => None,
        }
    }
}

/// What to do when context or character text exceeds its budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetPolicy {
    #[default]
    Clip,
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBudget {
    pub context_tokens: usize,
    pub char_tokens: usize,
    pub policy: BudgetPolicy,
}

impl Default for PromptBudget {
    fn default() -> Self {
        Self {
            context_tokens: CONTEXT_BUDGET,
            char_tokens: CHAR_BUDGET,
            policy: BudgetPolicy::Clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    /// Indices of the characters mentioned, in prompt order.
    pub characters: Vec<usize>,
    pub image_tags: usize,
    /// Number of trailing context sentences kept.
    pub context_used: usize,
}

fn entry_text(template: Template, c: &CharacterEntry) -> String {
    match template {
        Template::NamesOnly => c.char_name.clone(),
        Template::NamesActors => format!("{} played by {}", c.char_name, c.actor_name),
        Template::NamesActorsImages => format!("{} played by {} <image>", c.char_name, c.actor_name),
    }
}

/// The character line alone, e.g. `possible characters: Jack played by Leonardo DiCaprio.`
pub fn render_characters(
    template: Template,
    chars: &[CharacterEntry],
    max_chars: usize,
    budget: &PromptBudget,
) -> Result<(String, Vec<usize>), GeneratorError> {
    let mut kept: Vec<String> = Vec::new();
    let mut idx = Vec::new();
    for (i, c) in chars.iter().enumerate() {
        if idx.len() == max_chars {
            if budget.policy == BudgetPolicy::Strict {
                return Err(GeneratorError::CharTextOverflow { tokens: usize::MAX, budget: budget.char_tokens });
            }
            break;
        }
        let mut trial = kept.clone();
        trial.push(entry_text(template, c));
        let text = format!("{CHAR_HEADER} {}.", trial.join(", "));
        let n = split_words(&text).len();
        if n > budget.char_tokens {
            if budget.policy == BudgetPolicy::Strict {
                return Err(GeneratorError::CharTextOverflow { tokens: n, budget: budget.char_tokens });
            }
            break;
        }
        kept = trial;
        idx.push(i);
    }
    if kept.is_empty() {
        Ok((CHAR_HEADER.to_string(), idx))
    } else {
        Ok((format!("{CHAR_HEADER} {}.", kept.join(", ")), idx))
    }
}

/// Newest whole context sentences fitting the budget, oldest first.
pub fn clip_context(context: &[String], budget: &PromptBudget) -> Result<Vec<String>, GeneratorError> {
    let total: usize = context.iter().map(|s| split_words(s).len()).sum();
    if total > budget.context_tokens && budget.policy == BudgetPolicy::Strict {
        return Err(GeneratorError::TooManyContextTokens { tokens: total, budget: budget.context_tokens });
    }
    let mut kept = Vec::new();
    let mut used = 0;
    for s in context.iter().rev() {
        let n = split_words(s).len();
        if n == 0 {
            continue;
        }
        if used + n > budget.context_tokens {
            break;
        }
        used += n;
        kept.push(s.trim().to_string());
    }
    kept.reverse();
    Ok(kept)
}

/// Context AD, then the character line, then the describe cue.
pub fn render_prompt(
    template: Option<Template>,
    chars: &[CharacterEntry],
    context: &[String],
    max_chars: usize,
    budget: &PromptBudget,
) -> Result<RenderedPrompt, GeneratorError> {
    let ctx = clip_context(context, budget)?;
    let mut parts: Vec<String> = ctx.clone();
    let mut characters = Vec::new();
    if let Some(t) = template {
        let (line, idx) = render_characters(t, chars, max_chars, budget)?;
        parts.push(line);
        characters = idx;
    }
    parts.push(DESCRIBE_CUE.to_string());
    let image_tags = if template == Some(Template::NamesActorsImages) { characters.len() } else { 0 };
    Ok(RenderedPrompt {
        text: parts.join(" "),
        characters,
        image_tags,
        context_used: ctx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ch(name: &str, actor: &str) -> CharacterEntry {
        CharacterEntry {
            char_name: name.into(),
            actor_name: actor.into(),
            portrait_feature: vec![1.0],
            exemplar_feature: None,
            top_k_frame_indices: vec![],
        }
    }

    #[test]
    fn template_strings() {
        let b = PromptBudget::default();
        let jack = [ch("Jack", "Leonardo DiCaprio")];
        let (line, _) = render_characters(Template::NamesActors, &jack, 10, &b).unwrap();
        assert_eq!(line, "possible characters: Jack played by Leonardo DiCaprio.");
        let (line, _) = render_characters(Template::NamesOnly, &[], 10, &b).unwrap();
        assert_eq!(line, "possible characters:");
        let two = [ch("Jack", "Leonardo DiCaprio"), ch("Rose", "Kate Winslet")];
        let p = render_prompt(Some(Template::NamesActorsImages), &two, &[], 10, &b).unwrap();
        assert_eq!(p.text.matches("<image>").count(), 2);
        assert_eq!(p.image_tags, 2);
        assert!(p.text.ends_with("Describe <video>:"));
    }

    #[test]
    fn context_first_and_clipped() {
        let b = PromptBudget::default();
        let ctx: Vec<String> = (0..10).map(|i| format!("sentence number {i} is here.")).collect();
        let p = render_prompt(Some(Template::NamesOnly), &[ch("Ann", "X Y")], &ctx, 10, &b).unwrap();
        assert_eq!(p.context_used, 5);
        assert!(p.text.starts_with("sentence number 5"));
        let strict = PromptBudget { policy: BudgetPolicy::Strict, ..b };
        assert!(matches!(
            render_prompt(None, &[], &ctx, 10, &strict),
            Err(GeneratorError::TooManyContextTokens { .. })
        ));
    }

    #[test]
    fn character_budget() {
        let many: Vec<CharacterEntry> = (0..20).map(|i| ch(&format!("Name{i}"), "First Last")).collect();
        let b = PromptBudget::default();
        let (line, idx) = render_characters(Template::NamesActors, &many, 20, &b).unwrap();
        assert!(split_words(&line).len() <= CHAR_BUDGET);
        assert!(idx.len() < 20);
        let strict = PromptBudget { policy: BudgetPolicy::Strict, ..b };
        assert!(matches!(
            render_characters(Template::NamesActors, &many, 20, &strict),
            Err(GeneratorError::CharTextOverflow { .. })
        ));
    }
}
