//! Synthetic tasks shaped like the three benchmark families: record
//! retrieval by numeric range, multi-passage lookup with one relevant
//! passage, and multi-aspect planning.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use super::task::{Branch, Segment, TaskError, TaskKind, TaskScript};

const NAMES: [&str; 24] = [
    "Ada", "Ben", "Cai", "Dee", "Eli", "Fay", "Gus", "Hana", "Ivo", "Jade", "Kai", "Lily", "Max", "Nia", "Oto",
    "Pia", "Quin", "Rey", "Sia", "Tom", "Uma", "Vic", "Wen", "Yuri",
];

const CITIES: [&str; 12] =
    ["Lyon", "Porto", "Graz", "Turin", "Ghent", "Brno", "Cork", "Bergen", "Split", "Pecs", "Kosice", "Tartu"];

const PEOPLE: [&str; 8] = ["Ilona Zrinyi", "Marta Holm", "Oren Vale", "Pia Brandt", "Ruth Keel", "Sofie Lund", "Tove Ahl", "Vera Nagy"];

const FILLER: [&str; 6] = [
    "The river runs north of the old mill and floods every spring.",
    "A bridge was rebuilt there after the war with local stone.",
    "The guild kept records of wool prices for two centuries.",
    "Its chapel holds a painted ceiling restored in the last decade.",
    "Trade fairs were held in the square each autumn.",
    "The railway reached the valley late, long after the canal.",
];

const ASPECTS: [&str; 10] = [
    "Technical", "Regulation", "Acceptance", "Business", "Environment", "Cost", "Safety", "Timeline", "Staffing",
    "Upkeep",
];

const TOPICS: [&str; 6] =
    ["drone delivery", "a night bus line", "rooftop solar", "a tool library", "bike sharing", "a repair cafe"];

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gpa(cents: u32) -> String {
    format!("{}.{:02}", cents / 100, cents % 100)
}

/// Pads `base` to exactly `len` bytes with filler words; longer bases are
/// kept as they are.
fn fit(base: String, len: usize) -> String {
    const PAD: &str = ", checked against the range";
    let mut s = base;
    let mut filler = PAD.chars().cycle();
    while s.len() < len {
        s.push(filler.next().expect("cycle"));
    }
    s
}

/// `n` students with distinct GPAs, exactly one inside the asked range.
/// Bodies are `body_len ± jitter` bytes.
pub fn gen_retrieval_task(n: usize, seed: u64, body_len: usize, jitter: usize) -> Result<TaskScript, TaskError> {
    if !(2..=16).contains(&n) {
        return Err(TaskError::InvalidParameter("n", "2..=16"));
    }
    if body_len < jitter + 15 {
        return Err(TaskError::InvalidParameter("body_len - jitter", ">= 15"));
    }
    let mut rng = rng_for(seed);
    let mut names = NAMES.to_vec();
    names.shuffle(&mut rng);
    names.truncate(n);

    let lo = rng.random_range(150..=340u32);
    let hi = lo + 39;
    let target = rng.random_range(0..n);
    let mut gpas = vec![rng.random_range(lo..=hi)];
    while gpas.len() < n {
        let g = rng.random_range(100..=450u32);
        if !(lo..=hi).contains(&g) && !gpas.contains(&g) {
            gpas.push(g);
        }
    }
    // the in-range value sits at `target`
    gpas.swap(0, target);

    let mut task = format!("Here are {n} students' records:\n");
    for (name, &g) in names.iter().zip(&gpas) {
        task.push_str(&format!("The student named {name} has a GPA of {}.\n", gpa(g)));
    }
    task.push_str(&format!(
        "Question: Which student has a GPA between {} and {}? Give your final answer in the format of \"name: {{answer}}\".",
        gpa(lo),
        gpa(hi)
    ));

    let branches = names
        .iter()
        .zip(&gpas)
        .map(|(name, &g)| {
            let verdict = if g > hi {
                "high"
            } else if g < lo {
                "low"
            } else {
                "in"
            };
            let len = body_len - jitter + rng.random_range(0..=2 * jitter);
            Branch { title: name.to_string(), body: fit(format!(" GPA {} {verdict}", gpa(g)), len) }
        })
        .collect();
    let answer = format!("name: {}", names[target]);
    TaskScript::new(
        TaskKind::Retrieval,
        task,
        vec![
            Segment::Text(format!("Check each GPA against {}-{}.", gpa(lo), gpa(hi))),
            Segment::Block(branches),
            Segment::Text(format!("\n{} is in range.\n{answer}", names[target])),
        ],
        Some(answer),
    )
}

/// Answer of a retrieval task recomputed from its prompt text by a plain
/// scan of the records.
pub fn solve_retrieval(task_text: &str) -> Option<String> {
    let question = task_text.lines().find(|l| l.starts_with("Question:"))?;
    let mut nums = question.split_whitespace().filter_map(|w| w.trim_end_matches('?').parse::<f64>().ok());
    let (lo, hi) = (nums.next()?, nums.next()?);
    let hits: Vec<&str> = task_text
        .lines()
        .filter_map(|l| {
            let rest = l.strip_prefix("The student named ")?;
            let (name, tail) = rest.split_once(" has a GPA of ")?;
            let g: f64 = tail.trim_end_matches('.').parse().ok()?;
            (lo <= g && g <= hi).then_some(name)
        })
        .collect();
    match hits.as_slice() {
        [one] => Some(format!("name: {one}")),
        _ => None,
    }
}

/// `n` passages, exactly one of which says where the asked person was born.
pub fn gen_multidoc_task(n: usize, seed: u64) -> Result<TaskScript, TaskError> {
    if !(2..=16).contains(&n) {
        return Err(TaskError::InvalidParameter("n", "2..=16"));
    }
    let mut rng = rng_for(seed);
    let person = PEOPLE[rng.random_range(0..PEOPLE.len())];
    let city = CITIES[rng.random_range(0..CITIES.len())];
    let relevant = rng.random_range(0..n);

    let mut task = String::new();
    let mut branches = Vec::with_capacity(n);
    for i in 0..n {
        let title = format!("Passage {}", i + 1);
        let (text, body) = if i == relevant {
            (format!("{person} was born in {city} and moved away young."), format!(" born in {city}"))
        } else {
            (FILLER[rng.random_range(0..FILLER.len())].to_string(), " not relevant".to_string())
        };
        task.push_str(&format!("{title}:\n{text}\n"));
        branches.push(Branch { title, body });
    }
    task.push_str(&format!(
        "Question: Where was {person} born? Check each passage one by one, then answer in the format 'Answer: your concise answer.'"
    ));
    let answer = format!("Answer: {city}.");
    TaskScript::new(
        TaskKind::Multidoc,
        task,
        vec![
            Segment::Text("Check each passage.".into()),
            Segment::Block(branches),
            Segment::Text(format!("\nPassage {} has it.\n{answer}", relevant + 1)),
        ],
        Some(answer),
    )
}

/// Aspect count for planning tasks: 2 plus a Binomial(8, 0.3) draw, so
/// 2..=10 with mean 4.4.
pub fn sample_planning_k(rng: &mut impl Rng) -> usize {
    let extra = Binomial::new(8, 0.3).expect("valid binomial").sample(rng);
    2 + extra as usize
}

/// `k` aspects of one plan, each analysed on its own, then summarised.
/// There is no single correct answer.
pub fn gen_planning_task(k: usize, seed: u64) -> Result<TaskScript, TaskError> {
    if !(2..=10).contains(&k) {
        return Err(TaskError::InvalidParameter("k", "2..=10"));
    }
    let mut rng = rng_for(seed);
    let topic = TOPICS[rng.random_range(0..TOPICS.len())];
    let mut aspects = ASPECTS.to_vec();
    aspects.shuffle(&mut rng);
    aspects.truncate(k);

    let task = format!(
        "Analyze the challenges {topic} may face from {k} dimensions ({}) and propose one solution for each, then give an overall evaluation.",
        aspects.join(", ").to_lowercase()
    );
    let branches = aspects
        .iter()
        .map(|a| {
            let risk = rng.random_range(1..=5);
            Branch {
                title: a.to_string(),
                body: format!(" risk level {risk} of 5, plan a staged pilot and review {}", a.to_lowercase()),
            }
        })
        .collect();
    TaskScript::new(
        TaskKind::Planning,
        task,
        vec![
            Segment::Text(format!("Review {topic} one dimension at a time.")),
            Segment::Block(branches),
            Segment::Text(format!("\nOverall, {topic} is feasible with a staged rollout.")),
        ],
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab;

    #[test]
    fn retrieval_shape_and_oracle() {
        for seed in 0..50 {
            let t = gen_retrieval_task(10, seed, 20, 5).unwrap();
            assert_eq!(t.shape.n_branches, 10);
            assert!(t.shape.body_lens.iter().all(|l| (15..=25).contains(l)), "{:?}", t.shape.body_lens);
            assert_eq!(solve_retrieval(&t.task_text), t.expected_answer);
        }
        let t = gen_retrieval_task(2, 7, 20, 0).unwrap();
        assert_eq!(t.shape.n_branches, 2);
        assert!(t.shape.body_lens.iter().all(|&l| l == 20));
    }

    #[test]
    fn retrieval_rejects_bad_n() {
        assert!(gen_retrieval_task(1, 0, 20, 5).is_err());
        assert!(gen_retrieval_task(17, 0, 20, 5).is_err());
    }

    #[test]
    fn multidoc_has_one_answering_branch() {
        for seed in 0..20 {
            let t = gen_multidoc_task(10, seed).unwrap();
            let city = t.expected_answer.as_ref().unwrap().trim_start_matches("Answer: ").trim_end_matches('.');
            let Segment::Block(bs) = &t.segments[1] else { panic!() };
            assert_eq!(bs.iter().filter(|b| b.body.contains(city)).count(), 1);
        }
    }

    #[test]
    fn planning_k_mean() {
        let mut rng = rng_for(99);
        let ks: Vec<usize> = (0..4000).map(|_| sample_planning_k(&mut rng)).collect();
        assert!(ks.iter().all(|k| (2..=10).contains(k)));
        let mean = ks.iter().sum::<usize>() as f64 / ks.len() as f64;
        assert!((mean - 4.4).abs() < 0.1, "{mean}");
        let t = gen_planning_task(2, 1).unwrap();
        assert_eq!(t.shape.n_branches, 2);
        assert!(t.expected_answer.is_none());
    }

    #[test]
    fn generated_text_is_plain() {
        for seed in 0..20 {
            for t in [
                gen_retrieval_task(16, seed, 20, 5).unwrap(),
                gen_multidoc_task(16, seed).unwrap(),
                gen_planning_task(10, seed).unwrap(),
            ] {
                let text = t.answer_text();
                assert_eq!(vocab::decode(&vocab::encode(&text)), text);
            }
        }
    }
}
