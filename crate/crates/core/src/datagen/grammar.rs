//! Templated keyword grammar.
//!
//! A sentence is `prefix bridge , KEYWORD clause .` where the prefix and the
//! optional bridge come from keyword-independent template families and the
//! clause comes from the keyword's own templates. Slots draw from closed
//! word classes. A slot is uniform over its class unless an earlier word of
//! the same template governs it through a seeded affinity table (a noun
//! restricts its adjectives, a verb its objects). Expected word counts, and
//! hence the unigram distribution, still follow analytically.

use super::vocab::Vocab;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Debug, PartialEq)]
pub enum Slot {
    Word(String),
    Class(usize),
    /// Present with the given probability.
    Optional(f64, Vec<Slot>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub weight: f64,
    pub slots: Vec<Slot>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordClass {
    pub name: String,
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeywordRule {
    pub word: String,
    pub weight: f64,
    pub clauses: Vec<Template>,
}

/// Selectional restriction: once a `head` word is placed, later `dependent`
/// slots in the same template draw uniformly from `allowed[head word]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affinity {
    pub head: usize,
    pub dependent: usize,
    pub allowed: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrammarSpec {
    pub classes: Vec<WordClass>,
    pub prefixes: Vec<Template>,
    pub bridges: Vec<Template>,
    pub keywords: Vec<KeywordRule>,
    pub affinities: Vec<Affinity>,
    pub seed: u64,
}

/// Most recent word of each head class within the current template.
type Heads = Vec<(usize, usize)>;

const AFFINITY_STREAM: u64 = 13;

/// One sampled sentence split at the prefix / continuation boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrammarSentence {
    pub keyword: usize,
    pub prefix: Vec<String>,
    pub continuation: Vec<String>,
}

impl GrammarSentence {
    pub fn words(&self) -> Vec<String> {
        self.prefix
            .iter()
            .chain(&self.continuation)
            .cloned()
            .collect()
    }
}

fn words(list: &str) -> Vec<String> {
    list.split_whitespace().map(str::to_string).collect()
}

fn parse_slots(pattern: &str, classes: &[WordClass]) -> Vec<Slot> {
    let mut out = Vec::new();
    let mut tokens = pattern.split_whitespace().peekable();
    while let Some(tok) = tokens.next() {
        if let Some(rest) = tok.strip_prefix('(') {
            // "(0.5 a b [c])" optional group
            let p: f64 = rest.parse().expect("optional probability");
            let mut inner = Vec::new();
            for t in tokens.by_ref() {
                if t == ")" {
                    break;
                }
                inner.push(t);
            }
            out.push(Slot::Optional(p, parse_slots(&inner.join(" "), classes)));
        } else if let Some(name) = tok.strip_prefix('[').and_then(|t| t.strip_suffix(']')) {
            let idx = classes
                .iter()
                .position(|c| c.name == name)
                .unwrap_or_else(|| panic!("unknown class {name}"));
            out.push(Slot::Class(idx));
        } else {
            out.push(Slot::Word(tok.to_string()));
        }
    }
    out
}

fn templates(classes: &[WordClass], list: &[(f64, &str)]) -> Vec<Template> {
    list.iter()
        .map(|&(weight, pattern)| Template {
            weight,
            slots: parse_slots(pattern, classes),
        })
        .collect()
}

impl GrammarSpec {
    /// The default task: twelve discourse connectives over a closed
    /// vocabulary of roughly three hundred words.
    pub fn default_task(seed: u64) -> Self {
        let class_defs: [(&str, &str); 14] = [
            ("poss", "my your our their his her"),
            (
                "noun",
                "salary job boss office team project schedule commute manager contract \
                 deadline workload desk budget meeting report client shift career colleague \
                 house garden kitchen apartment neighbor street car bike dog cat \
                 roof window sofa garage yard landlord rent heater fridge balcony \
                 trip vacation weekend holiday morning evening dinner breakfast lunch party \
                 concert movie book game class lesson exam course hobby routine \
                 printer laptop phone camera guitar piano bakery library gym pool \
                 hotel train bus flight ticket school teacher doctor dentist market",
            ),
            (
                "adj_neg",
                "low bad awful terrible noisy small old boring slow expensive \
                 messy cold dark crowded late tiring stressful difficult broken dull \
                 dirty rude loud weak strange",
            ),
            (
                "adj_pos",
                "rewarding great pleasant lovely quiet bright warm cheap fast fun \
                 calm cozy friendly clean useful exciting relaxing wonderful nice fine \
                 cheerful modern smooth spacious charming",
            ),
            ("intens", "really very quite rather extremely fairly pretty incredibly somewhat truly"),
            ("pron", "i we they you"),
            (
                "name",
                "anna ben carla david elena frank grace henry iris jack kate leo maya nina oscar paul quinn rosa sam tina",
            ),
            (
                "verb_past",
                "finished started missed enjoyed cleaned fixed visited planned cancelled booked \
                 sold bought painted repaired ignored changed moved lost found watched \
                 borrowed washed rented shared skipped",
            ),
            (
                "verb_pres",
                "find love like enjoy need want keep hate miss prefer appreciate value admire dislike tolerate",
            ),
            (
                "time",
                "yesterday today tonight recently again early finally quickly suddenly twice later slowly",
            ),
            ("period", "year week month season spring summer autumn winter semester quarter"),
            ("verb_fut", "look ask search apply wait pay"),
            ("group", "others friends neighbors colleagues everyone"),
            ("feel", "happy sad tired glad calm proud upset bored anxious excited relieved nervous"),
        ];
        let classes: Vec<WordClass> = class_defs
            .iter()
            .map(|(n, w)| WordClass {
                name: n.to_string(),
                words: words(w),
            })
            .collect();
        let prefixes = templates(
            &classes,
            &[
                (0.3, "[poss] [noun] is [intens] [adj_neg]"),
                (0.2, "[poss] [noun] was [intens] [adj_pos]"),
                (0.25, "[name] [verb_past] the [noun] [time]"),
                (0.25, "[pron] [verb_past] [poss] [noun]"),
            ],
        );
        let bridges = templates(
            &classes,
            &[
                (0.4, ""),
                (0.15, "compared to [group]"),
                (0.1, "most of the time"),
                (0.1, "as usual"),
                (0.1, "these days"),
                (0.15, "this [period]"),
            ],
        );
        let contrast = [
            (0.5, "i [verb_pres] the [noun] (0.5 very ) much"),
            (0.5, "the [noun] is [intens] [adj_pos]"),
        ];
        let cause = [
            (0.5, "the [noun] was [intens] [adj_neg]"),
            (0.5, "[name] [verb_past] the [noun] [time]"),
        ];
        let result = [
            (0.5, "i will [verb_fut] for a new [noun]"),
            (0.5, "we [verb_past] the [noun] [time]"),
        ];
        let addition = [
            (0.5, "the [noun] is [adj_neg] too"),
            (0.5, "[name] feels [intens] [feel]"),
        ];
        let keyword_defs: [(&str, &[(f64, &str)]); 12] = [
            ("nevertheless", &contrast),
            ("however", &contrast),
            ("still", &contrast),
            ("because", &cause),
            ("since", &cause),
            ("therefore", &result),
            ("consequently", &result),
            ("moreover", &addition),
            ("furthermore", &addition),
            (
                "meanwhile",
                &[(1.0, "[name] [verb_past] the [noun] (0.5 [time] )")],
            ),
            (
                "fortunately",
                &[(1.0, "the [noun] is (0.5 [intens] ) [adj_pos]")],
            ),
            (
                "unfortunately",
                &[(1.0, "the [noun] is (0.5 [intens] ) [adj_neg]")],
            ),
        ];
        let keywords = keyword_defs
            .iter()
            .map(|(w, clauses)| KeywordRule {
                word: w.to_string(),
                weight: 1.0 / keyword_defs.len() as f64,
                clauses: templates(&classes, clauses),
            })
            .collect();
        let class = |name: &str| classes.iter().position(|c| c.name == name).expect("class");
        let mut rng = stream_rng(seed, AFFINITY_STREAM);
        let affinities = [
            ("noun", "adj_neg", 4),
            ("noun", "adj_pos", 4),
            ("verb_past", "noun", 8),
            ("verb_pres", "noun", 8),
            ("verb_fut", "noun", 8),
        ]
        .iter()
        .map(|&(h, d, k)| {
            let (head, dependent) = (class(h), class(d));
            let allowed = (0..classes[head].words.len())
                .map(|_| {
                    let mut pick =
                        rand::seq::index::sample(&mut rng, classes[dependent].words.len(), k)
                            .into_vec();
                    pick.sort_unstable();
                    pick
                })
                .collect();
            Affinity {
                head,
                dependent,
                allowed,
            }
        })
        .collect();
        let spec = Self {
            classes,
            prefixes,
            bridges,
            keywords,
            affinities,
            seed,
        };
        spec.validate().expect("default grammar is valid");
        spec
    }

    pub fn keyword_words(&self) -> Vec<String> {
        self.keywords.iter().map(|k| k.word.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ts: &[Template], what: &str| -> Result<()> {
            let total: f64 = ts.iter().map(|t| t.weight).sum();
            if ts.is_empty() || (total - 1.0).abs() > 1e-9 || ts.iter().any(|t| t.weight < 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{what} weights must sum to 1"
                )));
            }
            Ok(())
        };
        check(&self.prefixes, "prefix")?;
        check(&self.bridges, "bridge")?;
        let kw_total: f64 = self.keywords.iter().map(|k| k.weight).sum();
        if self.keywords.is_empty() || (kw_total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("keyword weights must sum to 1".into()));
        }
        for k in &self.keywords {
            check(&k.clauses, &k.word)?;
        }
        for a in &self.affinities {
            let (h, d) = (self.classes.get(a.head), self.classes.get(a.dependent));
            let (Some(h), Some(d)) = (h, d) else {
                return Err(Error::InvalidConfig(
                    "affinity refers to an unknown class".into(),
                ));
            };
            let fits = |s: &Vec<usize>| {
                !s.is_empty()
                    && s.windows(2).all(|w| w[0] < w[1])
                    && s.iter().all(|&i| i < d.words.len())
            };
            if a.allowed.len() != h.words.len() || !a.allowed.iter().all(fits) {
                return Err(Error::InvalidConfig(format!(
                    "bad affinity table {} -> {}",
                    h.name, d.name
                )));
            }
        }
        // a head inside an optional group would make government probabilistic
        fn optional_heads(slots: &[Slot], inside: bool, heads: &BTreeSet<usize>) -> bool {
            slots.iter().any(|s| match s {
                Slot::Class(c) => inside && heads.contains(c),
                Slot::Optional(_, inner) => optional_heads(inner, true, heads),
                Slot::Word(_) => false,
            })
        }
        let heads: BTreeSet<usize> = self.affinities.iter().map(|a| a.head).collect();
        let all = self
            .prefixes
            .iter()
            .chain(&self.bridges)
            .chain(self.keywords.iter().flat_map(|k| &k.clauses));
        for t in all {
            if optional_heads(&t.slots, false, &heads) {
                return Err(Error::InvalidConfig(
                    "head class inside an optional group".into(),
                ));
            }
        }
        // keywords may only be produced by the keyword slot
        let kws: BTreeSet<&str> = self.keywords.iter().map(|k| k.word.as_str()).collect();
        for w in self.template_words() {
            if kws.contains(w.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "keyword {w} appears in a template"
                )));
            }
        }
        Ok(())
    }

    fn template_words(&self) -> BTreeSet<String> {
        fn collect(slots: &[Slot], classes: &[WordClass], out: &mut BTreeSet<String>) {
            for s in slots {
                match s {
                    Slot::Word(w) => {
                        out.insert(w.clone());
                    }
                    Slot::Class(c) => out.extend(classes[*c].words.iter().cloned()),
                    Slot::Optional(_, inner) => collect(inner, classes, out),
                }
            }
        }
        let mut out = BTreeSet::new();
        let all = self
            .prefixes
            .iter()
            .chain(&self.bridges)
            .chain(self.keywords.iter().flat_map(|k| &k.clauses));
        for t in all {
            collect(&t.slots, &self.classes, &mut out);
        }
        out.insert(",".into());
        out.insert(".".into());
        out
    }

    /// Every surface word the grammar can produce, sorted.
    pub fn surface_words(&self) -> Vec<String> {
        let mut all = self.template_words();
        all.extend(self.keyword_words());
        all.into_iter().collect()
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(&self.surface_words(), &self.keyword_words())
    }

    /// Allowed word indices for a `class` slot given the heads placed so
    /// far, or `None` when the slot is unrestricted.
    fn governed<'a>(&'a self, class: usize, heads: &[(usize, usize)]) -> Option<&'a [usize]> {
        self.affinities
            .iter()
            .filter(|a| a.dependent == class)
            .find_map(|a| {
                heads
                    .iter()
                    .find(|(h, _)| *h == a.head)
                    .map(|&(_, w)| a.allowed[w].as_slice())
            })
    }

    fn is_head(&self, class: usize) -> bool {
        self.affinities.iter().any(|a| a.head == class)
    }

    fn place(&self, heads: &mut Heads, class: usize, word: usize) {
        if self.is_head(class) {
            heads.retain(|(h, _)| *h != class);
            heads.push((class, word));
        }
    }

    fn expand<R: Rng>(
        &self,
        slots: &[Slot],
        rng: &mut R,
        out: &mut Vec<String>,
        heads: &mut Heads,
    ) {
        for s in slots {
            match s {
                Slot::Word(w) => out.push(w.clone()),
                Slot::Class(c) => {
                    let i = match self.governed(*c, heads) {
                        Some(allowed) => allowed[rng.gen_range(0..allowed.len())],
                        None => rng.gen_range(0..self.classes[*c].words.len()),
                    };
                    out.push(self.classes[*c].words[i].clone());
                    self.place(heads, *c, i);
                }
                Slot::Optional(p, inner) => {
                    if rng.gen::<f64>() < *p {
                        self.expand(inner, rng, out, heads);
                    }
                }
            }
        }
    }

    fn expand_template<R: Rng>(&self, t: &Template, rng: &mut R, out: &mut Vec<String>) {
        self.expand(&t.slots, rng, out, &mut Vec::new());
    }

    fn pick<'a, R: Rng>(ts: &'a [Template], rng: &mut R) -> &'a Template {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for t in ts {
            acc += t.weight;
            if u < acc {
                return t;
            }
        }
        ts.last().unwrap()
    }

    pub fn sample_keyword<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, k) in self.keywords.iter().enumerate() {
            acc += k.weight;
            if u < acc {
                return i;
            }
        }
        self.keywords.len() - 1
    }

    pub fn sample_sentence_with<R: Rng>(&self, keyword: usize, rng: &mut R) -> GrammarSentence {
        let mut prefix = Vec::new();
        self.expand_template(Self::pick(&self.prefixes, rng), rng, &mut prefix);
        let mut continuation = Vec::new();
        self.expand_template(Self::pick(&self.bridges, rng), rng, &mut continuation);
        continuation.push(",".into());
        let rule = &self.keywords[keyword];
        continuation.push(rule.word.clone());
        self.expand_template(Self::pick(&rule.clauses, rng), rng, &mut continuation);
        continuation.push(".".into());
        GrammarSentence {
            keyword,
            prefix,
            continuation,
        }
    }

    pub fn sample_sentence<R: Rng>(&self, rng: &mut R) -> GrammarSentence {
        let k = self.sample_keyword(rng);
        self.sample_sentence_with(k, rng)
    }

    /// Expected word counts per sentence and the analytic unigram
    /// distribution over surface words.
    pub fn analytic_unigram(&self) -> BTreeMap<String, f64> {
        let mut counts = BTreeMap::new();
        for t in self.prefixes.iter().chain(&self.bridges) {
            self.add_expected(&t.slots, t.weight, &mut Vec::new(), &mut counts);
        }
        for k in &self.keywords {
            *counts.entry(k.word.clone()).or_default() += k.weight;
            for c in &k.clauses {
                self.add_expected(&c.slots, k.weight * c.weight, &mut Vec::new(), &mut counts);
            }
        }
        *counts.entry(",".into()).or_default() += 1.0;
        *counts.entry(".".into()).or_default() += 1.0;
        let total: f64 = counts.values().sum();
        counts.values_mut().for_each(|v| *v /= total);
        counts
    }

    /// Adds `scale` times the expected word counts of `slots`. `heads` holds
    /// the marginal word distribution of each head class placed so far; a
    /// dependent depends only on its head word, so marginals suffice.
    fn add_expected(
        &self,
        slots: &[Slot],
        scale: f64,
        heads: &mut Vec<(usize, Vec<f64>)>,
        acc: &mut BTreeMap<String, f64>,
    ) {
        for s in slots {
            match s {
                Slot::Word(w) => *acc.entry(w.clone()).or_default() += scale,
                Slot::Class(c) => {
                    let n = self.classes[*c].words.len();
                    let governing = self
                        .affinities
                        .iter()
                        .filter(|a| a.dependent == *c)
                        .find_map(|a| {
                            heads
                                .iter()
                                .find(|(h, _)| *h == a.head)
                                .map(|(_, p)| (a, p))
                        });
                    let q = match governing {
                        Some((a, p)) => {
                            let mut q = vec![0.0; n];
                            for (allowed, ph) in a.allowed.iter().zip(p) {
                                for &j in allowed {
                                    q[j] += ph / allowed.len() as f64;
                                }
                            }
                            q
                        }
                        None => vec![1.0 / n as f64; n],
                    };
                    for (w, qj) in self.classes[*c].words.iter().zip(&q) {
                        *acc.entry(w.clone()).or_default() += scale * qj;
                    }
                    if self.is_head(*c) {
                        heads.retain(|(h, _)| h != c);
                        heads.push((*c, q));
                    }
                }
                // heads never sit inside optional groups, so `heads` is unchanged
                Slot::Optional(p, inner) => self.add_expected(inner, scale * p, heads, acc),
            }
        }
    }

    /// Parse states `(position, heads)` reachable after matching `slots`.
    fn match_ends(
        &self,
        slots: &[Slot],
        words: &[String],
        start: (usize, Heads),
    ) -> BTreeSet<(usize, Heads)> {
        let mut frontier = BTreeSet::from([start]);
        for s in slots {
            let mut next = BTreeSet::new();
            for (p, heads) in &frontier {
                match s {
                    Slot::Word(w) => {
                        if words.get(*p) == Some(w) {
                            next.insert((p + 1, heads.clone()));
                        }
                    }
                    Slot::Class(c) => {
                        let Some(i) = words
                            .get(*p)
                            .and_then(|w| self.classes[*c].words.iter().position(|x| x == w))
                        else {
                            continue;
                        };
                        if self
                            .governed(*c, heads)
                            .is_some_and(|allowed| !allowed.contains(&i))
                        {
                            continue;
                        }
                        let mut heads = heads.clone();
                        self.place(&mut heads, *c, i);
                        next.insert((p + 1, heads));
                    }
                    Slot::Optional(_, inner) => {
                        next.insert((*p, heads.clone()));
                        next.extend(self.match_ends(inner, words, (*p, heads.clone())));
                    }
                }
            }
            frontier = next;
        }
        frontier
    }

    fn match_any(
        &self,
        ts: &[Template],
        words: &[String],
        starts: &BTreeSet<usize>,
    ) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for &s in starts {
            for t in ts.iter().filter(|t| t.weight > 0.0) {
                out.extend(
                    self.match_ends(&t.slots, words, (s, Vec::new()))
                        .into_iter()
                        .map(|(p, _)| p),
                );
            }
        }
        out
    }

    /// Parses a sentence; returns the keyword index when it is derivable.
    pub fn recognize(&self, words: &[String]) -> Option<usize> {
        let after_prefix = self.match_any(&self.prefixes, words, &BTreeSet::from([0]));
        let after_bridge = self.match_any(&self.bridges, words, &after_prefix);
        for p in after_bridge {
            if words.get(p).map(String::as_str) != Some(",") {
                continue;
            }
            for (k, rule) in self.keywords.iter().enumerate() {
                if words.get(p + 1) != Some(&rule.word) {
                    continue;
                }
                let ends = self.match_any(&rule.clauses, words, &BTreeSet::from([p + 2]));
                if ends
                    .iter()
                    .any(|&e| e + 1 == words.len() && words[e] == ".")
                {
                    return Some(k);
                }
            }
        }
        None
    }

    pub fn to_manifest(&self) -> String {
        fn slots_text(slots: &[Slot], classes: &[WordClass]) -> String {
            slots
                .iter()
                .map(|s| match s {
                    Slot::Word(w) => w.clone(),
                    Slot::Class(c) => format!("[{}]", classes[*c].name),
                    Slot::Optional(p, inner) => format!("({p} {} )", slots_text(inner, classes)),
                })
                .collect::<Vec<_>>()
                .join(" ")
        }
        let mut s = format!("grammar seed={}\n", self.seed);
        for c in &self.classes {
            s.push_str(&format!("class {} {}\n", c.name, c.words.join(" ")));
        }
        for t in &self.prefixes {
            s.push_str(&format!(
                "prefix {} {}\n",
                t.weight,
                slots_text(&t.slots, &self.classes)
            ));
        }
        for t in &self.bridges {
            s.push_str(&format!(
                "bridge {} {}\n",
                t.weight,
                slots_text(&t.slots, &self.classes)
            ));
        }
        for k in &self.keywords {
            for t in &k.clauses {
                s.push_str(&format!(
                    "clause {} {} {} {}\n",
                    k.word,
                    k.weight,
                    t.weight,
                    slots_text(&t.slots, &self.classes)
                ));
            }
        }
        for a in &self.affinities {
            let (h, d) = (&self.classes[a.head], &self.classes[a.dependent]);
            for (w, allowed) in h.words.iter().zip(&a.allowed) {
                let ws: Vec<&str> = allowed.iter().map(|&i| d.words[i].as_str()).collect();
                s.push_str(&format!(
                    "affinity {} {} {w} {}\n",
                    h.name,
                    d.name,
                    ws.join(" ")
                ));
            }
        }
        s
    }
}

/// Independent stream per purpose so corpora drawn with one seed do not
/// overlap.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
