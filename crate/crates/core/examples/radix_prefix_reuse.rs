//! Saving prompts into the radix trie, restoring prefixes, and leaf-oldest
//! eviction.

use deltaserve::kv::UnifiedKvCache;
use deltaserve::radix::RadixTrie;
use deltaserve::{SeqId, Token};

fn commit(kv: &mut UnifiedKvCache, trie: &mut RadixTrie, tokens: &[Token]) -> usize {
    let seq = SeqId(0);
    let m = trie.longest_prefix(tokens);
    if let Some(holder) = m.holder {
        kv.alias_from_table(holder, seq, 0, m.len).expect("alias");
    }
    kv.append_cells(seq, tokens.len() - m.len).expect("capacity");
    let added = trie.save(kv, tokens, seq).expect("save");
    kv.clear(seq);
    println!("restored {:>3}, prefilled {:>3}, trie now holds {} cells", m.len, tokens.len() - m.len, trie.cells());
    added
}

fn main() {
    let mut kv = UnifiedKvCache::new(4096);
    let mut trie = RadixTrie::new(4096);
    let system: Vec<Token> = (0..200).map(Token).collect();
    let prompts: Vec<Vec<Token>> = (1..=3u32)
        .map(|agent| {
            let mut p = system.clone();
            p.extend((0..40).map(|i| Token(agent * 10_000 + i)));
            p
        })
        .collect();
    for p in &prompts {
        commit(&mut kv, &mut trie, p);
    }

    // A follow-up turn of agent 1 only pays for its new suffix.
    let mut turn2 = prompts[0].clone();
    turn2.extend((0..25).map(|i| Token(90_000 + i)));
    commit(&mut kv, &mut trie, &turn2);

    for n in trie.dump() {
        println!("node prefix_len={:>3} cells={:>3} touch={} children={}", n.prefix_len, n.cells, n.last_touch, n.children);
    }

    // Touch agent 3, then squeeze: agent 2's tail is the oldest leaf.
    trie.longest_prefix(&prompts[2]);
    let freed = trie.evict(&mut kv, 1);
    println!("evicted {freed} cells; agent 2 match is now {} of {}", trie.peek(&prompts[1]), prompts[1].len());
    println!("shared system prompt still resident: {}", trie.peek(&system) == system.len());
    println!("{:?}", trie.stats());
}
