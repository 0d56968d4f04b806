use alloc::vec::Vec;

use super::trace::Solution;
use crate::table::Answer;

/// The shared answer when every solution normalizes to the same text.
pub fn consensus_check(solutions: &[Solution]) -> Option<Answer> {
    let first = solutions.first()?;
    solutions
        .iter()
        .all(|s| s.answer.same_as(&first.answer))
        .then(|| first.answer.clone())
}

/// Plurality vote over normalized answers. Ties go to the group whose
/// earliest supporter comes first in `presentation_order`; personas missing
/// from the order rank after it, by position in `solutions`.
pub fn majority_vote(solutions: &[Solution], presentation_order: &[alloc::string::String]) -> Option<Answer> {
    struct Group<'a> {
        answer: &'a Answer,
        count: usize,
        earliest: usize,
    }
    let rank = |idx: usize, s: &Solution| {
        presentation_order
            .iter()
            .position(|p| *p == s.persona)
            .unwrap_or(presentation_order.len() + idx)
    };
    let mut groups: Vec<Group<'_>> = Vec::new();
    for (idx, s) in solutions.iter().enumerate() {
        let r = rank(idx, s);
        match groups.iter_mut().find(|g| g.answer.same_as(&s.answer)) {
            Some(g) => {
                g.count += 1;
                if r < g.earliest {
                    g.earliest = r;
                    g.answer = &s.answer;
                }
            }
            None => groups.push(Group {
                answer: &s.answer,
                count: 1,
                earliest: r,
            }),
        }
    }
    groups
        .into_iter()
        .max_by(|a, b| a.count.cmp(&b.count).then(b.earliest.cmp(&a.earliest)))
        .map(|g| g.answer.clone())
}
