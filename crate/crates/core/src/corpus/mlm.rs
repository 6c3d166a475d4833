use super::types::SentenceRecord;
use super::vocab::{Vocab, CLS, SEP};
use crate::error::{Error, Result};

/// Tokenizes raw sentence texts for masked-language-model training. Each
/// text is split into payload chunks of at most `max_len - 2` characters and
/// every chunk is wrapped in `<cls>` … `<sep>`. Empty texts yield nothing.
pub fn mlm_corpus(records: &[SentenceRecord], vocab: &Vocab, max_len: usize) -> Result<Vec<Vec<usize>>> {
    if max_len < 3 {
        return Err(Error::config(format!("max_len {max_len} leaves no room for MLM payload")));
    }
    let payload = max_len - 2;
    let mut out = Vec::new();
    for r in records {
        let ids = vocab.encode(&r.text);
        for chunk in ids.chunks(payload) {
            let mut seq = Vec::with_capacity(chunk.len() + 2);
            seq.push(CLS);
            seq.extend_from_slice(chunk);
            seq.push(SEP);
            out.push(seq);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::build_vocab;

    #[test]
    fn chunking() {
        let short = SentenceRecord::new("肺炎咳嗽了", vec![]);
        let long = SentenceRecord::new("a".repeat(400), vec![]);
        let vocab = build_vocab(&[short.clone(), long.clone()], 1).unwrap();
        assert!(mlm_corpus(&[], &vocab, 200).unwrap().is_empty());

        let seqs = mlm_corpus(std::slice::from_ref(&short), &vocab, 200).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].len(), 7);
        assert_eq!((seqs[0][0], seqs[0][6]), (CLS, SEP));

        let seqs = mlm_corpus(&[long], &vocab, 200).unwrap();
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![200, 200, 6]);
    }
}
