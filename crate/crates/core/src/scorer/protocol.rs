//! Newline-delimited JSON wire protocol spoken with external scorers.
//!
//! ```text
//! -> {"id": 1, "op": "info"}
//! <- {"id": 1, "vocab_size": .., "image_start": .., "image_end": .., "visual_lo": .., "visual_hi": .., "supports_tokenize": .., "name": ..}
//! -> {"id": 2, "op": "logprobs", "contexts": [[1, 2], [3]]}
//! <- {"id": 2, "logprobs": [[...], [...]]}
//! -> {"id": 3, "op": "tokenize", "text": "red car"}
//! <- {"id": 3, "tokens": [7, 12]}
//! <- {"id": 4, "error": "bad_request", "message": ".."}
//! ```
//!
//! [`serve`] answers requests from any in-process [`Scorer`]; it is the
//! loopback server used by tests and by `genret scorer serve`.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::Scorer;
use crate::error::Error;
use crate::token_index::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Op {
    Info,
    Logprobs { contexts: Vec<Vec<u64>> },
    Tokenize { text: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(flatten)]
    pub op: Op,
}

pub fn error_reply(id: Option<u64>, code: &str, message: impl Into<String>) -> Value {
    json!({ "id": id, "error": code, "message": message.into() })
}

fn error_code(err: &Error) -> &'static str {
    match err {
        Error::TokenOutOfRange { .. } => "token_out_of_range",
        Error::EmptyInput | Error::UnknownWord(_) => "bad_request",
        Error::Unsupported(_) => "unsupported",
        _ => "internal",
    }
}

/// Computes the reply for one request line.
pub fn handle_line<S: Scorer + ?Sized>(scorer: &S, line: &str) -> Value {
    let raw: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return error_reply(None, "bad_request", format!("invalid JSON: {e}")),
    };
    let id = raw.get("id").and_then(Value::as_u64);
    let req: Request = match serde_json::from_value(raw) {
        Ok(r) => r,
        Err(e) => return error_reply(id, "bad_request", e.to_string()),
    };
    let info = scorer.info();
    let result = match req.op {
        Op::Info => {
            let mut v = serde_json::to_value(info).expect("info serializes");
            v["id"] = json!(req.id);
            return v;
        }
        Op::Logprobs { contexts } => {
            let mut ctxs = Vec::with_capacity(contexts.len());
            for c in contexts {
                let mut ctx = Vec::with_capacity(c.len());
                for t in c {
                    if t >= info.vocab_size as u64 {
                        return error_reply(
                            Some(req.id),
                            "token_out_of_range",
                            format!("token {t} >= vocab_size {}", info.vocab_size),
                        );
                    }
                    ctx.push(t as TokenId);
                }
                ctxs.push(ctx);
            }
            scorer
                .next_logprobs(&ctxs)
                .map(|lp| json!({ "id": req.id, "logprobs": lp }))
        }
        Op::Tokenize { text } => scorer
            .tokenize(&text)
            .map(|tokens| json!({ "id": req.id, "tokens": tokens })),
    };
    result.unwrap_or_else(|e| error_reply(Some(req.id), error_code(&e), e.to_string()))
}

/// Serves requests until `input` reaches EOF.
pub fn serve<S, R, W>(scorer: &S, input: R, mut output: W) -> io::Result<()>
where
    S: Scorer + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle_line(scorer, &line);
        serde_json::to_writer(&mut output, &reply)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::ToyScorer;

    fn toy() -> ToyScorer {
        ToyScorer::parse("INFO vocab_size=4 image_start=2 image_end=3 visual=0-1\nWORD a=0\nDEFAULT : 0=0.25 1=0.75\n")
            .unwrap()
    }

    #[test]
    fn request_encoding() {
        let r = Request { id: 7, op: Op::Info };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"id":7,"op":"info"}"#);
        let r: Request = serde_json::from_str(r#"{"id":3,"op":"logprobs","contexts":[[1,2]]}"#).unwrap();
        assert_eq!(
            r.op,
            Op::Logprobs {
                contexts: vec![vec![1, 2]]
            }
        );
    }

    #[test]
    fn replies() {
        let s = toy();
        let info = handle_line(&s, r#"{"id":1,"op":"info"}"#);
        assert_eq!(info["id"], 1);
        assert_eq!(info["visual_hi"], 1);
        let lp = handle_line(&s, r#"{"id":9,"op":"logprobs","contexts":[[0]]}"#);
        assert_eq!(lp["logprobs"][0][1].as_f64().unwrap(), 0.75f64.ln());
        let tk = handle_line(&s, r#"{"id":2,"op":"tokenize","text":"a"}"#);
        assert_eq!(tk["tokens"], json!([0]));
    }

    #[test]
    fn error_replies() {
        let s = toy();
        assert_eq!(handle_line(&s, r#"{"id":4}"#)["error"], "bad_request");
        assert_eq!(handle_line(&s, r#"{"id":4}"#)["id"], 4);
        assert_eq!(handle_line(&s, "not json")["error"], "bad_request");
        assert_eq!(
            handle_line(&s, r#"{"id":5,"op":"logprobs","contexts":[[9]]}"#)["error"],
            "token_out_of_range"
        );
    }

    #[test]
    fn serve_until_eof() {
        let s = toy();
        let input = b"{\"id\":1,\"op\":\"info\"}\n\n{\"id\":2,\"op\":\"tokenize\",\"text\":\"a\"}\n";
        let mut out = Vec::new();
        serve(&s, &input[..], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 2);
    }
}
