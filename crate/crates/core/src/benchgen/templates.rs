//! Question template banks, one per (task, style, answer form).
//!
//! Slots: `{r}` region text (single-region tasks), `{r0}`..`{r2}`
//! region texts, `{f}` `{a}` `{b}` `{g}` feature surfaces, `{s}` similarity
//! subset, `{opts}` option list, `{cands}` candidate list, `{ca}` `{cb}`
//! candidate texts, `{v0}` `{v1}` context values, `{cmp}` "more"/"higher".

use super::{AnswerForm, Style, Task};

type Bank = &'static [&'static str];

const CMP_AVG_HL: [Bank; 3] = [
    &[
        "how does the {f} compare to the national average in region {r}?",
        "compared with the national average, is the {f} higher or lower in region {r}?",
        "is the {f} higher or lower than the national average in region {r}?",
        "relative to the national average, is the {f} higher or lower in region {r}?",
        "higher or lower than the national average, what is the {f} of region {r}?",
    ],
    &[
        "kindly indicate whether the {f} lies higher or lower relative to the national average within region {r}.",
        "with respect to the national average, would the {f} be characterized as higher or lower in region {r}?",
        "please ascertain whether the {f} is higher or lower than the national average for region {r}.",
        "in comparison with the national average, would one characterize the {f} as higher or lower in region {r}?",
        "it is requested that you determine whether the {f} is higher or lower than the national average in region {r}.",
    ],
    &[
        "yo is the {f} higher or lower than the national avg in region {r}?",
        "{f} vs the national avg, higher or lower for region {r}??",
        "{f} higher or lower than national avg... region {r}?",
        "quick q: {f} compared to the national avg, higher or lower in region {r}?",
        "ok so is the {f} higher or lower than the national avg in region {r}?",
    ],
];

const CMP_AVG_YN: [Bank; 3] = [
    &[
        "is the {f} level higher than the national average level in region {r}?",
        "is the {f} level above the national average in region {r}?",
        "compared with the national average, is the {f} higher in region {r}?",
        "is the {f} higher than the national average in region {r}?",
        "does the {f} exceed the national average in region {r}?",
    ],
    &[
        "would it be accurate to state that the {f} is higher than the national average within region {r}?",
        "kindly confirm whether the {f} is higher than the national average in region {r}.",
        "is it the case that the {f} recorded is higher than the national average in region {r}?",
        "please establish whether the {f} is higher than the national average for region {r}.",
        "can it be affirmed that the {f} exceeds the national average in region {r}?",
    ],
    &[
        "is {f} higher than the national avg in region {r}??",
        "yo is the {f} higher than the national avg in region {r}?",
        "{f} higher than national avg in region {r}? y/n",
        "quick q, is {f} higher than the national avg in region {r}?",
        "ok is the {f} like higher than national avg in region {r}?",
    ],
];

const FEAT_CMP: [Bank; 3] = [
    &[
        "are there more {a} or more {b} in region {r}?",
        "which is more common, {a} or {b}, in region {r}?",
        "more {a} or more {b}: which holds for region {r}?",
        "which are more numerous, {a} or {b}, in region {r}?",
        "of {a} and {b}, which does region {r} have more of?",
    ],
    &[
        "kindly indicate whether {a} or {b} are more numerous within region {r}.",
        "please ascertain which category predominates, {a} or {b}, in region {r}.",
        "are {a} or {b} present in greater number with respect to region {r}?",
        "it is requested that you determine whether there are more {a} or more {b} in region {r}.",
        "which are more prevalent, {a} or {b}, in the locality designated region {r}?",
    ],
    &[
        "yo more {a} or more {b} in region {r}?",
        "more {a} or more {b} in region {r}??",
        "quick q: {a} or {b}, which has more in region {r}?",
        "ok so more {a} or {b} in region {r} lol",
        "{a} or {b}, more of which in region {r}?",
    ],
];

const ABS_VALUE: [Bank; 3] = [
    &[
        "options: {opts}. how many {f} are in region {r}?",
        "options: {opts}. what is the number of {f} in region {r}?",
        "options: {opts}. how many {f} does region {r} have?",
        "options: {opts}. count the {f} in region {r}.",
        "options: {opts}. how many {f} does one find in region {r}?",
    ],
    &[
        "options: {opts}. kindly indicate the number of {f} situated within region {r}.",
        "options: {opts}. please ascertain the quantity of {f} located in region {r}.",
        "options: {opts}. what is the precise count of {f} pertaining to region {r}?",
        "options: {opts}. it is requested that you state how many {f} are possessed by region {r}.",
        "options: {opts}. how many {f} are present therein, with respect to region {r}?",
    ],
    &[
        "options: {opts}. yo how many {f} in region {r}?",
        "options: {opts}. how many {f} does region {r} got??",
        "options: {opts}. quick q: # of {f} in region {r}?",
        "options: {opts}. ok so how many {f} r in region {r}",
        "options: {opts}. {f} count for region {r}?",
    ],
];

const DESCRIBE: [Bank; 3] = [
    &[
        "describe region {r}.",
        "give a description of region {r}.",
        "what is the profile of region {r}?",
        "summarize the profile of region {r}.",
        "provide an overview of region {r}.",
    ],
    &[
        "kindly furnish a description of region {r}.",
        "please provide a comprehensive characterization of region {r}.",
        "it is requested that you summarize the salient attributes of region {r}.",
        "would you describe the profile exhibited by region {r}?",
        "please articulate an overview of region {r}.",
    ],
    &[
        "yo describe region {r}",
        "what's the deal with region {r}??",
        "quick summary of region {r} pls",
        "ok tell me about region {r}",
        "what's the vibe of region {r}?",
    ],
];

const MOST_SIMILAR: [Bank; 3] = [
    &[
        "in terms of {s}, which candidate is most similar to region {r0}? candidates: {cands}.",
        "in {s}, which one is most similar to region {r0}? candidates: {cands}.",
        "which candidate is most similar in terms of {s} to region {r0}? candidates: {cands}.",
        "find the candidate most similar in terms of {s} to region {r0}. candidates: {cands}.",
        "when considering {s}, which region is most similar to region {r0}? candidates: {cands}.",
    ],
    &[
        "with respect to {s}, kindly identify the candidate most similar to region {r0}. the candidates are {cands}.",
        "in terms of {s}, which bears the greatest resemblance to region {r0}? consider the candidates {cands}.",
        "regarding {s}, please ascertain which is most similar to region {r0}, given the candidates {cands}.",
        "in {s}, which would be deemed most similar to region {r0} among the candidates {cands}?",
        "it is requested that you select the one most similar in {s} to region {r0}. the candidates are {cands}.",
    ],
    &[
        "in {s}, which is most similar to region {r0}? candidates: {cands}.",
        "yo for {s}, which one's most similar to region {r0}?? candidates: {cands}.",
        "quick q, most similar in {s} to region {r0}? candidates: {cands}.",
        "ok so {s} wise, which is most similar to region {r0}? candidates: {cands}.",
        "most similar in {s} to region {r0} pls. candidates: {cands}.",
    ],
];

const LEAST_SIMILAR: [Bank; 3] = [
    &[
        "in terms of {s}, which candidate is least similar to region {r0}? candidates: {cands}.",
        "in {s}, which one is least similar to region {r0}? candidates: {cands}.",
        "which candidate is least similar in terms of {s} to region {r0}? candidates: {cands}.",
        "find the candidate least similar in terms of {s} to region {r0}. candidates: {cands}.",
        "when considering {s}, which region is least similar to region {r0}? candidates: {cands}.",
    ],
    &[
        "with respect to {s}, kindly identify the candidate least similar to region {r0}. the candidates are {cands}.",
        "in terms of {s}, which bears the least resemblance to region {r0}? consider the candidates {cands}.",
        "regarding {s}, please ascertain which is least similar to region {r0}, given the candidates {cands}.",
        "in {s}, which would be deemed least similar to region {r0} among the candidates {cands}?",
        "it is requested that you select the one least similar in {s} to region {r0}. the candidates are {cands}.",
    ],
    &[
        "in {s}, which is least similar to region {r0}? candidates: {cands}.",
        "yo for {s}, which one's least similar to region {r0}?? candidates: {cands}.",
        "quick q, least similar in {s} to region {r0}? candidates: {cands}.",
        "ok so {s} wise, which is least similar to region {r0}? candidates: {cands}.",
        "least similar in {s} to region {r0} pls. candidates: {cands}.",
    ],
];

const ABS_WITH_CONTEXT: [Bank; 3] = [
    &[
        "options: {opts}. region {r0} has {v0} {f} and region {r1} has {v1} {f}. how many {f} are in region {r2}?",
        "options: {opts}. region {r0} contains {v0} {f}, while region {r1} contains {v1} {f}. how many {f} does region {r2} have?",
        "options: {opts}. there are {v0} {f} in region {r0} and {v1} {f} in region {r1}. what is the number of {f} in region {r2}?",
        "options: {opts}. given that region {r0} has {v0} {f} and region {r1} has {v1} {f}, how many {f} are in region {r2}?",
        "options: {opts}. region {r0}: {v0} {f}. region {r1}: {v1} {f}. how many {f} in region {r2}?",
    ],
    &[
        "options: {opts}. it is known that region {r0} possesses {v0} {f} and region {r1} possesses {v1} {f}. kindly indicate the number of {f} in region {r2}.",
        "options: {opts}. whereas region {r0} contains {v0} {f} and region {r1} contains {v1} {f}, please ascertain how many {f} are contained in region {r2}.",
        "options: {opts}. given {v0} {f} within region {r0} and {v1} {f} within region {r1}, what quantity of {f} pertains to region {r2}?",
        "options: {opts}. with region {r0} exhibiting {v0} {f} and region {r1} exhibiting {v1} {f}, how many {f} are possessed by region {r2}?",
        "options: {opts}. considering that region {r0} has {v0} {f} and region {r1} has {v1} {f}, please state the count of {f} in region {r2}.",
    ],
    &[
        "options: {opts}. region {r0} got {v0} {f}, region {r1} got {v1} {f}. how many {f} in region {r2}?",
        "options: {opts}. yo region {r0} has {v0} {f} and region {r1} has {v1} {f}, so how many {f} in region {r2}??",
        "options: {opts}. ok {v0} {f} in region {r0}, {v1} {f} in region {r1}. what about region {r2}?",
        "options: {opts}. quick q: region {r0} = {v0} {f}, region {r1} = {v1} {f}, region {r2} = ??",
        "options: {opts}. so region {r0} has {v0} {f} n region {r1} has {v1} {f}. how many {f} in region {r2}",
    ],
];

const CROSS_REGION: [Bank; 3] = [
    &[
        "which region has {cmp} {f}: {ca} or {cb}?",
        "in {f}, which region has {cmp}: {ca} or {cb}?",
        "which one has {cmp} {f}, {ca} or {cb}?",
        "{cmp} {f}: does {ca} or {cb} have them?",
        "comparing {f}, which has {cmp}: {ca} or {cb}?",
    ],
    &[
        "kindly indicate which exhibits {cmp} {f}: {ca} or {cb}.",
        "please ascertain which possesses {cmp} {f}, {ca} or {cb}.",
        "with respect to {f}, which would be characterized as having {cmp}, {ca} or {cb}?",
        "it is requested that you determine which region has {cmp} {f}, {ca} or {cb}.",
        "which demonstrates {cmp} {f}, the region {ca} or the region {cb}?",
    ],
    &[
        "yo which has {cmp} {f}, {ca} or {cb}?",
        "{cmp} {f}, who got it: {ca} vs {cb}??",
        "quick q: {cmp} {f} in {ca} or {cb}?",
        "ok so who has {cmp} {f}, {ca} or {cb}",
        "{cmp} {f}: {ca} or {cb}?",
    ],
];

const MULTI_HOP: [Bank; 3] = [
    &[
        "take the candidate most similar in terms of {s} to region {r0}. is its {g} higher than the national average? candidates: {cands}.",
        "find the candidate most similar in {s} to region {r0}, then tell whether its {g} is higher than the national average. candidates: {cands}.",
        "is the {g} higher than the national average for the candidate most similar in terms of {s} to region {r0}? candidates: {cands}.",
        "identify the candidate most similar in {s} to region {r0}. does it have a higher {g} than the national average? candidates: {cands}.",
        "is the {g} higher than the national average for the candidate most similar in {s} to region {r0}? candidates: {cands}.",
    ],
    &[
        "having identified the candidate most similar with respect to {s} to region {r0}, kindly indicate whether its {g} is higher than the national average. the candidates are {cands}.",
        "with regard to the one most resembling in {s} region {r0}, is its {g} higher than the national average? consider the candidates {cands}.",
        "please ascertain whether the candidate most similar in terms of {s} to region {r0} exhibits a higher {g} than the national average, given the candidates {cands}.",
        "would the one most similar in {s} to region {r0} possess a higher {g} than the national average? the candidates are {cands}.",
        "it is requested that you determine whether the candidate most similar in {s} to region {r0} has a higher {g} than the national average. the candidates are {cands}.",
    ],
    &[
        "the one most similar in {s} to region {r0}, is its {g} higher than national avg? candidates: {cands}.",
        "yo most similar for {s} to region {r0}, does it got higher {g} than the national avg?? candidates: {cands}.",
        "quick q, most similar in {s} to region {r0}, then is {g} higher than national avg? candidates: {cands}.",
        "ok pick most similar in {s} to region {r0}, {g} higher than national avg? y/n. candidates: {cands}.",
        "most similar ({s}) to region {r0}, is its {g} higher than the national avg? candidates: {cands}.",
    ],
];

fn idx(style: Style) -> usize {
    match style {
        Style::Canonical => 0,
        Style::Formal => 1,
        Style::Informal => 2,
    }
}

pub fn bank(task: Task, style: Style, form: AnswerForm) -> Bank {
    let i = idx(style);
    match task {
        Task::CmpAvg => match form {
            AnswerForm::YesNo => CMP_AVG_YN[i],
            _ => CMP_AVG_HL[i],
        },
        Task::FeatCmp => FEAT_CMP[i],
        Task::AbsValueMc => ABS_VALUE[i],
        Task::Describe => DESCRIBE[i],
        Task::MostSimilar => MOST_SIMILAR[i],
        Task::LeastSimilar => LEAST_SIMILAR[i],
        Task::AbsWithContext => ABS_WITH_CONTEXT[i],
        Task::CrossRegionCmp => CROSS_REGION[i],
        Task::MultiHop => MULTI_HOP[i],
    }
}

/// Every template string, for vocabulary construction.
pub fn all_templates() -> Vec<&'static str> {
    let mut out = Vec::new();
    for task in Task::ALL {
        for style in Style::ALL {
            for form in [AnswerForm::Plain, AnswerForm::YesNo] {
                out.extend_from_slice(bank(task, style, form));
            }
        }
    }
    out
}

/// Replaces `{key}` slots.
pub fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut s = template.to_string();
    for (k, v) in slots {
        s = s.replace(&format!("{{{k}}}"), v);
    }
    s
}
