use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Strategy;
use crate::retrieval::{
    class_relevance, classification_report, cosine_sim_matrix, mrr, rank_queries, recall_at_k, text_image_scores,
    ClassificationReport,
};

use super::model::Model;
use super::train::TrainData;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classification,
    ImageToImage,
    TextToImage,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "i2i" => Ok(Task::ImageToImage),
            "t2i" => Ok(Task::TextToImage),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::ImageToImage => "i2i",
            Task::TextToImage => "t2i",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub task: String,
    pub queries: usize,
    pub recall_at_1: f64,
    pub mrr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum EvalReport {
    Classification(ClassificationReport),
    Retrieval(RetrievalReport),
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalReport::Classification(r) => {
                writeln!(f, "accuracy  {:.4}", r.accuracy)?;
                writeln!(f, "precision {:.4}", r.precision)?;
                writeln!(f, "recall    {:.4}", r.recall)?;
                write!(f, "f1        {:.4}", r.f1)
            }
            EvalReport::Retrieval(r) => {
                writeln!(f, "{} over {} queries", r.task, r.queries)?;
                writeln!(f, "recall@1 {:.4}", r.recall_at_1)?;
                write!(f, "mrr      {:.4}", r.mrr)
            }
        }
    }
}

/// Scores `model` on `data` with class-match relevance for retrieval.
pub fn evaluate(model: &Model, data: &TrainData, task: Task, exec: Strategy) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Evaluation("nothing to evaluate".into()));
    }
    let images = model.image_embeddings(&data.images, exec)?;
    let (scores, exclude_self) = match task {
        Task::Classification => {
            let pred = model.predict(&images)?;
            return Ok(EvalReport::Classification(classification_report(&pred, &data.labels)?));
        }
        Task::ImageToImage => (cosine_sim_matrix(&images, &images)?, true),
        Task::TextToImage => (text_image_scores(&data.texts, &images)?, false),
    };
    let relevant = class_relevance(&data.labels, &data.labels, exclude_self);
    if let Some(q) = relevant.iter().position(|r| r.is_empty()) {
        return Err(Error::Evaluation(format!(
            "{task} query {q} has no other item of its class in the manifest"
        )));
    }
    let ranked = rank_queries(&scores, exclude_self)?;
    Ok(EvalReport::Retrieval(RetrievalReport {
        task: task.to_string(),
        queries: ranked.len(),
        recall_at_1: recall_at_k(&ranked, &relevant, 1)?,
        mrr: mrr(&ranked, &relevant)?,
    }))
}
