//! Generators and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;

use docfusion::hierarchy::{build_document_tree, AssignmentEntry};
use docfusion::layout::extract_header_list;
use docfusion::metrics::{Evidence, QaRecord};
use docfusion::{AnnotatedLayout, BoundingBox, DocumentTree, HierarchyAssignment, Segment, SegmentType};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}

const WORDS: &[&str] = &[
    "budget", "alpha", "river", "sensor", "ledger", "north", "valve", "quartz", "meadow", "signal",
    "harbor", "copper", "lantern", "orbit", "pylon", "cedar", "delta", "ember", "fjord", "glacier",
    "3.5%", "(see", "note)", "x-ray", "ümlaut", "café", "§4", "2019", "e.g.,", "--",
];

/// Random words joined by mostly single spaces, with the odd double space,
/// tab or newline inside (never at either end).
pub fn random_text(rng: &mut impl Rng, tokens: usize) -> String {
    let mut out = String::new();
    for i in 0..tokens {
        if i > 0 {
            out.push_str(match rng.gen_range(0..40) {
                0 => "  ",
                1 => "\n",
                2 => "\t",
                _ => " ",
            });
        }
        out.push_str(WORDS.choose(rng).unwrap());
    }
    out
}

fn token_count_for_body(rng: &mut impl Rng) -> usize {
    match rng.gen_range(0..10) {
        0 => 0,
        1 => rng.gen_range(400..1600),
        2 | 3 => rng.gen_range(100..400),
        _ => rng.gen_range(1..100),
    }
}

/// Layout plus a random valid assignment: at most 59 segments (60 nodes with
/// the root), headers at most 5 deep so text sits at depth 6 or less.
/// With `long_headings`, some headings run to a few hundred tokens.
pub fn random_document(
    rng: &mut impl Rng,
    id: &str,
    long_headings: bool,
) -> (AnnotatedLayout, HierarchyAssignment, DocumentTree) {
    let n = rng.gen_range(1..=59);
    let mut segments = Vec::with_capacity(n);
    let mut entries = Vec::new();
    let mut open: Vec<String> = Vec::new();
    for i in 0..n {
        let seg_id = format!("n{i}");
        let bbox = BoundingBox::new((i / 20) as u32, (i % 20) as u32 * 50, 40);
        if rng.gen_bool(0.35) {
            let level = rng.gen_range(0..=open.len().min(4));
            open.truncate(level);
            let heading_tokens = if long_headings && rng.gen_bool(0.2) {
                rng.gen_range(100..=300)
            } else {
                rng.gen_range(1..8)
            };
            entries.push(AssignmentEntry::new(seg_id.clone(), open.last().map(String::as_str)));
            let ty = if i == 0 && rng.gen_bool(0.5) { SegmentType::Title } else { SegmentType::SectionHeader };
            segments.push(Segment::new(seg_id.clone(), ty, bbox, random_text(rng, heading_tokens)));
            open.push(seg_id);
        } else {
            let ty = *[SegmentType::Text, SegmentType::Text, SegmentType::List, SegmentType::Table, SegmentType::Caption]
                .choose(rng)
                .unwrap();
            let tokens = token_count_for_body(rng);
            segments.push(Segment::new(seg_id, ty, bbox, random_text(rng, tokens)));
        }
    }
    let layout = AnnotatedLayout::new(id, segments).unwrap();
    let assignment = HierarchyAssignment::new(entries);
    let tree = build_document_tree(&layout, &extract_header_list(&layout), &assignment).unwrap();
    (layout, assignment, tree)
}

/// A document with dotted-number headers up to four levels and its
/// ground-truth parents.
pub fn numbered_document(rng: &mut impl Rng, id: &str) -> (AnnotatedLayout, HierarchyAssignment) {
    let mut segments = Vec::new();
    let mut entries = Vec::new();
    let mut top = 0u32;
    let mut page = 0u32;
    let mut place = |rng: &mut dyn rand::RngCore| {
        top += rng.gen_range(30..120);
        if top > 3000 {
            page += 1;
            top = 80;
        }
        BoundingBox::new(page, top, rng.gen_range(60..90))
    };
    let mut next = 0usize;
    let mut sid = || {
        next += 1;
        format!("{id}-{next}")
    };

    if rng.gen_bool(0.5) {
        let t = sid();
        segments.push(Segment::new(t.clone(), SegmentType::Title, place(rng), random_text(rng, 4)));
        entries.push(AssignmentEntry::new(t, None));
    }
    // Stack of (number, id) for the open path.
    let mut path: Vec<(Vec<u32>, String)> = Vec::new();
    let mut counters = [0u32; 4];
    for _ in 0..rng.gen_range(1..25) {
        let depth = rng.gen_range(0..=path.len().min(3));
        path.truncate(depth);
        counters[depth] += 1;
        for c in counters.iter_mut().skip(depth + 1) {
            *c = 0;
        }
        let number: Vec<u32> = counters[..=depth].to_vec();
        let dotted = number.iter().map(u32::to_string).collect::<Vec<_>>().join(".");
        let label = match (depth, rng.gen_range(0..3)) {
            (0, 0) => format!("{dotted}. "),
            _ => format!("{dotted} "),
        };
        let h = sid();
        let words = rng.gen_range(1..5);
        let parent = path.last().map(|(_, p)| p.as_str());
        entries.push(AssignmentEntry::new(h.clone(), parent));
        segments.push(Segment::new(
            h.clone(),
            SegmentType::SectionHeader,
            place(rng),
            format!("{label}{}", capitalized_words(rng, words)),
        ));
        path.push((number, h));
        for _ in 0..rng.gen_range(0..3) {
            let tokens = rng.gen_range(5..60);
            segments.push(Segment::new(sid(), SegmentType::Text, place(rng), random_text(rng, tokens)));
        }
    }
    (AnnotatedLayout::new(id, segments).unwrap(), HierarchyAssignment::new(entries))
}

fn capitalized_words(rng: &mut impl Rng, n: usize) -> String {
    const HEADS: &[&str] = &["Scope", "Methods", "Results", "Budget", "Risks", "Staffing", "Outlook", "Design"];
    (0..n).map(|_| *HEADS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Ordered forest with node labels, as nested vectors.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Forest(pub Vec<(u8, Forest)>);

impl Forest {
    pub fn size(&self) -> usize {
        self.0.iter().map(|(_, c)| 1 + c.size()).sum()
    }

    /// Every forest reachable by one unit insert, delete or relabel.
    pub fn neighbours(&self, labels: &[u8], out: &mut Vec<Forest>) {
        let items = &self.0;
        for (i, (label, kids)) in items.iter().enumerate() {
            let mut v = items[..i].to_vec();
            v.extend(kids.0.iter().cloned());
            v.extend(items[i + 1..].iter().cloned());
            out.push(Forest(v));
            for &l in labels {
                if l != *label {
                    let mut v = items.clone();
                    v[i].0 = l;
                    out.push(Forest(v));
                }
            }
            let mut sub = Vec::new();
            kids.neighbours(labels, &mut sub);
            for k in sub {
                let mut v = items.clone();
                v[i].1 = k;
                out.push(Forest(v));
            }
        }
        for s in 0..=items.len() {
            for e in s..=items.len() {
                for &l in labels {
                    let mut v = items[..s].to_vec();
                    v.push((l, Forest(items[s..e].to_vec())));
                    v.extend(items[e..].iter().cloned());
                    out.push(Forest(v));
                }
            }
        }
    }

    /// The single tree of a one-rooted forest as an arena tree.
    pub fn to_ordered_tree(&self) -> docfusion::metrics::OrderedTree<u8> {
        assert_eq!(self.0.len(), 1);
        let mut labels = Vec::new();
        let mut parents = Vec::new();
        fn walk(f: &Forest, parent: Option<usize>, labels: &mut Vec<u8>, parents: &mut Vec<Option<usize>>) {
            for (label, kids) in &f.0 {
                let me = labels.len();
                labels.push(*label);
                parents.push(parent);
                walk(kids, Some(me), labels, parents);
            }
        }
        walk(self, None, &mut labels, &mut parents);
        docfusion::metrics::OrderedTree::from_parents(labels, &parents)
    }
}

/// All ordered forests with exactly `n` nodes over `labels`.
pub fn forests_of_size(n: usize, labels: &[u8], memo: &mut HashMap<usize, Vec<Forest>>) -> Vec<Forest> {
    if let Some(v) = memo.get(&n) {
        return v.clone();
    }
    let mut out = Vec::new();
    if n == 0 {
        out.push(Forest(Vec::new()));
    } else {
        for first in 1..=n {
            let inner = forests_of_size(first - 1, labels, memo);
            let rest = forests_of_size(n - first, labels, memo);
            for &l in labels {
                for kids in &inner {
                    for tail in &rest {
                        let mut v = vec![(l, kids.clone())];
                        v.extend(tail.0.iter().cloned());
                        out.push(Forest(v));
                    }
                }
            }
        }
    }
    memo.insert(n, out.clone());
    out
}

#[derive(Clone)]
pub enum Reply {
    Content(String),
    Stall(Duration),
}

/// Chat-completion stand-in: the i-th request gets the i-th scripted reply
/// (the last one repeats). Returns the endpoint URL and a request counter.
pub fn mock_endpoint(script: Vec<Reply>) -> (String, Arc<Mutex<usize>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let count = Arc::new(Mutex::new(0usize));
    let counter = count.clone();
    thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { continue };
            let reply = script[i.min(script.len() - 1)].clone();
            *counter.lock().unwrap() += 1;
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0u8; length];
                let _ = reader.read_exact(&mut body);
                match reply {
                    Reply::Stall(d) => thread::sleep(d),
                    Reply::Content(content) => {
                        let payload = serde_json::json!({
                            "choices": [{"message": {"role": "assistant", "content": content}}]
                        })
                        .to_string();
                        let _ = write!(
                            stream,
                            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                            payload.len(),
                            payload
                        );
                    }
                }
            });
        }
    });
    (url, count)
}

const FACILITIES: [&str; 30] = [
    "Harrowgate", "Brindlemoor", "Cresthaven", "Dunmarrow", "Elderwick", "Fallowmere", "Glenrook",
    "Hollinsby", "Ivystone", "Jarrowfield", "Kestrelton", "Larchbury", "Marrowdale", "Northwyke",
    "Oakhurst", "Pennycross", "Quarrington", "Ravensholt", "Saltmarsh", "Thornbury", "Umberleigh",
    "Valecrest", "Westerfold", "Yarrowby", "Zellmoor", "Ashcombe", "Bramblewick", "Coldharbour",
    "Draycott", "Emberton",
];

const DIVISIONS: [&str; 5] = [
    "Water Supply",
    "Wastewater Treatment",
    "Energy Management",
    "Asset Maintenance",
    "Customer Services",
];

const UNITS: [&str; 8] = [
    "Pumping Stations",
    "Reservoir Network",
    "Filtration Plant",
    "Distribution Mains",
    "Control Room",
    "Field Depots",
    "Laboratory Services",
    "Fleet Operations",
];

/// (section name, measured quantity, unit of the answer)
const TOPICS: [(&str, &str, &str); 6] = [
    ("Inspection Regime", "inspection interval", "days"),
    ("Staffing Levels", "assigned crew size", "technicians"),
    ("Capital Budget", "approved capital allocation", "thousand pounds"),
    ("Incident Record", "number of reportable incidents", "incidents"),
    ("Energy Consumption", "annual electricity consumption", "megawatt hours"),
    ("Compliance Audit", "latest audit score", "percent"),
];

const FILLER: [&str; 12] = [
    "Figures were compiled from the monthly operating returns and checked against the asset register.",
    "The duty engineer reviews these readings each quarter and escalates any deviation to the regional manager.",
    "Where data were missing the previous period's value was carried forward and flagged for follow-up.",
    "Contractors working on site are included in the totals only when they hold a standing permit.",
    "The method is unchanged from last year, so the values can be compared directly.",
    "A short narrative accompanies each return explaining any unusual weather or supply interruptions.",
    "Local teams confirmed the figures during the spring walk-through and signed off the summary sheet.",
    "Targets for next year will be set once the regulator publishes its updated guidance.",
    "This section should be read together with the risk register held by the operations directorate.",
    "No material changes to working practices were recorded during the reporting period.",
    "Spot checks by the internal audit team found the underlying records to be complete.",
    "Further detail is available on request from the performance reporting office.",
];

pub struct SyntheticCorpus {
    pub layouts: Vec<AnnotatedLayout>,
    pub qa: Vec<QaRecord>,
    /// The generator's section hierarchy: title, then divisions, units and topics.
    pub assignments: BTreeMap<String, HierarchyAssignment>,
}

/// The bundled benchmark: 30 utility reports with three-level numbered
/// sections and two questions per report. Each question names the facility
/// and the full section path; the facility name appears only in the title.
pub fn synthetic_corpus(rng: &mut impl Rng) -> SyntheticCorpus {
    let mut layouts = Vec::new();
    let mut qa = Vec::new();
    let mut assignments = BTreeMap::new();
    for (d, facility) in FACILITIES.iter().enumerate() {
        let doc_id = format!("report-{:02}", d + 1);
        let mut segments = Vec::new();
        let mut page = 0u32;
        let mut top = 60u32;
        let mut next = 0usize;
        let mut push = |segments: &mut Vec<Segment>, ty: SegmentType, text: String, gap: u32, page: &mut u32, top: &mut u32| {
            next += 1;
            let id = format!("s{next}");
            segments.push(Segment::new(id.clone(), ty, BoundingBox { page_number: *page, top: *top, left: 72, width: 460, height: gap.saturating_sub(8).max(12) }, text));
            *top += gap;
            if *top > 2900 {
                *page += 1;
                *top = 60;
            }
            id
        };
        let filler = |rng: &mut dyn rand::RngCore, n: usize| {
            let mut picks: Vec<&str> = FILLER.to_vec();
            picks.shuffle(rng);
            picks[..n].join(" ")
        };

        let mut entries = Vec::new();
        let title = push(&mut segments, SegmentType::Title, format!("{facility} Regional Utility Annual Operations Report"), 90, &mut page, &mut top);
        entries.push(AssignmentEntry::new(title.clone(), None));
        let intro = filler(rng, 3);
        push(&mut segments, SegmentType::Text, intro, 120, &mut page, &mut top);

        let mut divisions = DIVISIONS.to_vec();
        divisions.shuffle(rng);
        // (evidence ids, question, answer)
        let mut candidates: Vec<(Vec<String>, String, String)> = Vec::new();
        for (i, division) in divisions[..3].iter().enumerate() {
            if i > 0 {
                page += 1;
                top = 60;
            }
            let div_id = push(&mut segments, SegmentType::SectionHeader, format!("{} {division}", i + 1), 50, &mut page, &mut top);
            entries.push(AssignmentEntry::new(div_id.clone(), Some(&title)));
            let n = rng.gen_range(1..=3);
            let overview = filler(rng, n);
            push(&mut segments, SegmentType::Text, overview, 90, &mut page, &mut top);
            let mut units = UNITS.to_vec();
            units.shuffle(rng);
            for (j, unit) in units[..3].iter().enumerate() {
                let unit_id = push(&mut segments, SegmentType::SectionHeader, format!("{}.{} {unit}", i + 1, j + 1), 45, &mut page, &mut top);
                entries.push(AssignmentEntry::new(unit_id.clone(), Some(&div_id)));
                if rng.gen_bool(0.5) {
                    let n = rng.gen_range(1..=2);
                    let note = filler(rng, n);
                    push(&mut segments, SegmentType::Text, note, 70, &mut page, &mut top);
                }
                let mut topics = TOPICS.to_vec();
                topics.shuffle(rng);
                for (k, (section, quantity, unit_name)) in topics[..3].iter().enumerate() {
                    let header = push(
                        &mut segments,
                        SegmentType::SectionHeader,
                        format!("{}.{}.{} {section}", i + 1, j + 1, k + 1),
                        40,
                        &mut page,
                        &mut top,
                    );
                    entries.push(AssignmentEntry::new(header.clone(), Some(&unit_id)));
                    let value = if *unit_name == "percent" { rng.gen_range(40..100) } else { rng.gen_range(3..990) };
                    let answer = format!("{value} {unit_name}");
                    let n = rng.gen_range(2..=5);
                    let body = format!(
                        "The {quantity} recorded for this unit is {answer}. {}",
                        filler(rng, n)
                    );
                    let text = push(&mut segments, SegmentType::Text, body, 110, &mut page, &mut top);
                    let question = format!(
                        "What is the {quantity} in the {} section for {unit} under {division} at {facility}?",
                        section.to_lowercase()
                    );
                    candidates.push((vec![header, text], question, answer));
                }
            }
        }
        let footer_top = 3100;
        for p in 0..=page {
            next += 1;
            segments.push(Segment::new(
                format!("s{next}"),
                SegmentType::Other,
                BoundingBox::new(p, footer_top, 300),
                format!("Page {}", p + 1),
            ));
        }

        candidates.shuffle(rng);
        for (q, (evidence, question, answer)) in candidates.into_iter().take(2).enumerate() {
            qa.push(QaRecord {
                query_id: format!("{doc_id}-q{}", q + 1),
                question,
                gold_answers: vec![answer],
                gold_evidence: Some(
                    evidence
                        .into_iter()
                        .map(|segment_id| Evidence {
                            document_id: doc_id.clone(),
                            segment_id: Some(segment_id),
                            page_number: None,
                        })
                        .collect(),
                ),
            });
        }
        assignments.insert(doc_id.clone(), HierarchyAssignment::new(entries));
        layouts.push(AnnotatedLayout::new(doc_id, segments).unwrap());
    }
    SyntheticCorpus { layouts, qa, assignments }
}
