//! Templated clinical-style corpus with known topics, for running the whole
//! pipeline without restricted notes.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::atomic_write;
use crate::corpus::{write_jsonl, RawDocument};
use crate::error::{Error, Result};

struct TopicPool {
    name: &'static str,
    services: &'static [&'static str],
    conditions: &'static [&'static str],
    findings: &'static [&'static str],
    tests: &'static [&'static str],
    meds: &'static [&'static str],
}

const POOLS: &[TopicPool] = &[
    TopicPool {
        name: "renal",
        services: &["nephrology", "renal"],
        conditions: &[
            "chronic kidney disease",
            "acute kidney injury",
            "nephrotic syndrome",
            "renal insufficiency",
            "diabetic nephropathy",
            "obstructive uropathy",
        ],
        findings: &[
            "rising creatinine",
            "reduced urine output",
            "proteinuria",
            "hyperkalemia",
            "metabolic acidosis",
            "bilateral hydronephrosis",
        ],
        tests: &["renal ultrasound", "urinalysis", "basic metabolic panel", "urine protein ratio", "kidney biopsy"],
        meds: &["sodium bicarbonate", "furosemide", "sevelamer", "calcitriol", "erythropoietin"],
    },
    TopicPool {
        name: "cardiac",
        services: &["cardiology", "cardiac"],
        conditions: &[
            "congestive heart failure",
            "atrial fibrillation",
            "coronary artery disease",
            "aortic stenosis",
            "cardiomyopathy",
            "myocardial infarction",
        ],
        findings: &[
            "reduced ejection fraction",
            "elevated troponin",
            "irregular rhythm",
            "jugular venous distension",
            "systolic murmur",
            "st segment depression",
        ],
        tests: &["echocardiogram", "electrocardiogram", "cardiac catheterization", "telemetry", "stress test"],
        meds: &["metoprolol", "apixaban", "atorvastatin", "lisinopril", "amiodarone"],
    },
    TopicPool {
        name: "pulmonary",
        services: &["pulmonology", "respiratory"],
        conditions: &["community acquired pneumonia", "copd exacerbation", "pulmonary embolism", "asthma", "pleural effusion"],
        findings: &["hypoxemia", "diffuse wheezing", "basilar crackles", "productive cough", "tachypnea"],
        tests: &["chest radiograph", "ct angiogram", "arterial blood gas", "spirometry", "sputum culture"],
        meds: &["albuterol", "prednisone", "azithromycin", "tiotropium", "supplemental oxygen"],
    },
    TopicPool {
        name: "neuro",
        services: &["neurology", "stroke"],
        conditions: &["ischemic stroke", "seizure disorder", "migraine", "multiple sclerosis", "subdural hematoma"],
        findings: &["left sided weakness", "aphasia", "altered mental status", "facial droop", "visual field cut"],
        tests: &["mri brain", "head ct", "electroencephalogram", "lumbar puncture", "carotid doppler"],
        meds: &["levetiracetam", "aspirin", "tissue plasminogen activator", "sumatriptan", "clopidogrel"],
    },
    TopicPool {
        name: "hepatic",
        services: &["hepatology", "liver"],
        conditions: &["alcoholic cirrhosis", "hepatitis c", "hepatic encephalopathy", "fatty liver disease", "portal hypertension"],
        findings: &["ascites", "jaundice", "elevated bilirubin", "esophageal varices", "asterixis"],
        tests: &["liver function tests", "abdominal ultrasound", "paracentesis", "endoscopy", "ammonia level"],
        meds: &["lactulose", "rifaximin", "spironolactone", "nadolol", "ursodiol"],
    },
];

const TEMPLATES: &[&str] = &[
    "{Service} team saw patient with {cond} and {finding} on {test} started on {med}.",
    "{Service} recommends {med} for {cond} after {test} showed {finding}.",
    "Known {cond} followed by {service} now with {finding} so {test} repeated and {med} continued.",
    "{Test} reviewed by {service} consistent with {cond} and {finding} treated with {med}.",
];

/// Number of available topic pools.
pub fn max_topics() -> usize {
    POOLS.len()
}

pub fn topic_names() -> Vec<&'static str> {
    POOLS.iter().map(|p| p.name).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub documents: Vec<RawDocument>,
    /// Topic of each document, aligned with `documents`.
    pub topics: Vec<String>,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map_or_else(String::new, |f| f.to_uppercase().chain(c).collect())
}

fn sentence<R: Rng>(pool: &TopicPool, rng: &mut R) -> String {
    let template = TEMPLATES.choose(rng).expect("templates");
    let med = *pool.meds.choose(rng).expect("meds");
    let test = *pool.tests.choose(rng).expect("tests");
    let service = *pool.services.choose(rng).expect("services");
    template
        .replace("{Service}", &capitalize(service))
        .replace("{service}", service)
        .replace("{cond}", pool.conditions.choose(rng).expect("conditions"))
        .replace("{finding}", pool.findings.choose(rng).expect("findings"))
        .replace("{Test}", &capitalize(test))
        .replace("{test}", test)
        .replace("{Med}", &capitalize(med))
        .replace("{med}", med)
}

/// `n_sentences` one-sentence documents spread round-robin over the first
/// `n_topics` topic pools.
pub fn generate_synthetic_corpus(n_sentences: usize, n_topics: usize, seed: u64) -> Result<SyntheticCorpus> {
    if n_topics < 2 || n_topics > POOLS.len() {
        return Err(Error::Usage(format!("n_topics must be between 2 and {}, got {n_topics}", POOLS.len())));
    }
    if n_sentences < n_topics {
        return Err(Error::Usage(format!("n_sentences ({n_sentences}) must be at least n_topics ({n_topics})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut documents = Vec::with_capacity(n_sentences);
    let mut topics = Vec::with_capacity(n_sentences);
    for i in 0..n_sentences {
        let pool = &POOLS[i % n_topics];
        documents.push(RawDocument {
            doc_id: format!("syn-{i:06}"),
            admission_id: format!("adm-{i:06}"),
            subject_id: format!("subj-{:05}", i / 3),
            text: sentence(pool, &mut rng),
        });
        topics.push(pool.name.to_string());
    }
    Ok(SyntheticCorpus { documents, topics })
}

impl SyntheticCorpus {
    /// `doc_id<TAB>topic` lines.
    pub fn topics_tsv(&self) -> String {
        let mut out = String::new();
        for (d, t) in self.documents.iter().zip(&self.topics) {
            writeln!(out, "{}\t{t}", d.doc_id).unwrap();
        }
        out
    }

    /// Cluster task lines, `text<TAB>topic`.
    pub fn cluster_tsv(&self) -> String {
        let mut out = String::new();
        for (d, t) in self.documents.iter().zip(&self.topics) {
            writeln!(out, "{}\t{t}", d.text).unwrap();
        }
        out
    }

    /// Writes `corpus.jsonl`, `topics.tsv` and `cluster_task.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_jsonl(&dir.join("corpus.jsonl"), &self.documents)?;
        atomic_write(&dir.join("topics.tsv"), self.topics_tsv().as_bytes())?;
        atomic_write(&dir.join("cluster_task.tsv"), self.cluster_tsv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::preprocess_document;

    #[test]
    fn every_document_is_one_clean_sentence() {
        let c = generate_synthetic_corpus(200, 5, 7).unwrap();
        for d in &c.documents {
            let recs = preprocess_document(d);
            assert_eq!(recs.len(), 1, "{}", d.text);
            assert_eq!(recs[0].text, d.text);
        }
    }

    #[test]
    fn counts_are_validated() {
        assert!(matches!(generate_synthetic_corpus(10, 1, 0), Err(Error::Usage(_))));
        assert!(matches!(generate_synthetic_corpus(1, 2, 0), Err(Error::Usage(_))));
        assert!(matches!(generate_synthetic_corpus(100, 9, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn seeded_and_aligned() {
        let a = generate_synthetic_corpus(50, 2, 42).unwrap();
        assert_eq!(a, generate_synthetic_corpus(50, 2, 42).unwrap());
        assert_ne!(a, generate_synthetic_corpus(50, 2, 43).unwrap());
        assert_eq!(a.topics_tsv().lines().count(), 50);
    }
}
