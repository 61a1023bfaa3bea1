//! Deterministic rubric prompt shared by every judge request.

use crate::corpus::{CultureContext, ImageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    Ranking,
    Pairwise,
    Absolute,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Ranking => "ranking",
            PromptMode::Pairwise => "pairwise",
            PromptMode::Absolute => "absolute",
        }
    }
}

fn condition_clause(context: CultureContext) -> &'static str {
    match context {
        CultureContext::None => {
            "Cultural condition: none - no explicit cultural framing is requested; \
judge the caption on its own terms."
        }
        CultureContext::Western => {
            "Cultural condition: Western - the caption should draw on associations \
and expressive habits natural to that cultural sphere."
        }
        CultureContext::Eastern => {
            "Cultural condition: Eastern - the caption should draw on associations \
and expressive habits natural to that cultural sphere."
        }
    }
}

/// Build the judging prompt: task framing, language tag, culture clause, the
/// six dimension definitions, the four score bands, one block per candidate,
/// and a strict output-format instruction. Same inputs, same string.
pub fn build_rubric_prompt(
    image: &ImageRecord,
    context: CultureContext,
    candidates: &[String],
    mode: PromptMode,
) -> String {
    let mut out = String::new();
    out.push_str("Task: judge short humorous captions for one image.\n");
    out.push_str(&format!(
        "Image descriptors: {}\n",
        image.descriptor_tokens.join(" ")
    ));
    out.push_str(&format!("Language: {}\n", context.language_tag()));
    out.push_str(condition_clause(context));
    out.push('\n');
    out.push_str(
        "Dimensions, each scored on a 0-10 scale:\n\
- IR, image relevance: the caption stays anchored to what the descriptors show.\n\
- CF, contextual fit: the caption genuinely works within the stated cultural condition.\n\
- SR, semantic richness: the caption adds interpretive layers beyond plain description.\n\
- Ra, reasonableness: the caption reads naturally and coherently.\n\
- Hu, humor: the caption lands a perceptible punchline.\n\
- Cr, creativity: the caption avoids templated phrasing and does not echo other candidates.\n",
    );
    out.push_str(
        "Score bands: 0-2 severe failure on the dimension; 3-5 partially met with \
clear defects; 6-7 solid with room to improve; 8-10 strong with only minor flaws.\n",
    );
    for (i, candidate) in candidates.iter().enumerate() {
        out.push_str(&format!("Candidate {i}: {candidate}\n"));
    }
    match mode {
        PromptMode::Ranking => out.push_str(
            "Output: reply with a JSON object {\"ranking\": [...]} listing every candidate \
index exactly once, best first. No other text.\n",
        ),
        PromptMode::Pairwise => out.push_str(
            "Output: reply with a JSON object {\"choice\": i} where i is the index of the \
better candidate. No other text.\n",
        ),
        PromptMode::Absolute => out.push_str(
            "Output: reply with a JSON object {\"scores\": {\"<index>\": {\"ir\": x, \"cf\": x, \
\"sr\": x, \"ra\": x, \"hu\": x, \"cr\": x}, ...}} covering every candidate. No other text.\n",
        ),
    }
    out
}
