//! Deterministic templated dialogues in the dataset's record shape, with
//! matching commonsense phrases. Used for smoke runs, fixtures, and demos
//! where the real corpus is not available.

use empathic_core::corpus::{Conversation, Speaker, Utterance};
use empathic_core::knowledge::Relation;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Theme {
    label: &'static str,
    slots: &'static [&'static str],
    situations: &'static [&'static str],
    openers: &'static [&'static str],
    replies: &'static [&'static str],
    followups: &'static [&'static str],
    closers: &'static [&'static str],
    user_wants: &'static [&'static str],
    user_reacts: &'static [&'static str],
    sys_intent: &'static [&'static str],
    sys_reacts: &'static [&'static str],
}

const THEMES: &[Theme] = &[
    Theme {
        label: "afraid",
        slots: &["spider", "storm", "noise downstairs", "dog next door"],
        situations: &[
            "I was scared of a {x} last night.",
            "A {x} frightened me when I was home alone.",
        ],
        openers: &[
            "I am so scared of the {x}, I could not sleep at all.",
            "There was a {x} last night and I was really frightened.",
            "I hate the {x}, it makes me so afraid.",
        ],
        replies: &[
            "Oh no, that sounds really scary. Are you safe now?",
            "That is frightening. Did you manage to calm down?",
            "I would be scared too. What did you do?",
        ],
        followups: &[
            "I stayed in my room with the lights on until morning.",
            "I called my brother and he came over to help.",
        ],
        closers: &[
            "I am glad you are safe. It is okay to be scared sometimes.",
            "That was smart. I hope you can rest tonight.",
        ],
        user_wants: &["to feel safe", "to get away from the {x}", "to call someone", "to hide"],
        user_reacts: &["scared", "afraid", "nervous", "frightened"],
        sys_intent: &["to comfort them", "to make sure they are ok", "to help"],
        sys_reacts: &["worried", "concerned", "caring"],
    },
    Theme {
        label: "proud",
        slots: &["exam", "painting", "marathon", "new job"],
        situations: &[
            "I finished my {x} and felt proud.",
            "My hard work on the {x} finally paid off.",
        ],
        openers: &[
            "I finally passed my {x} after months of work!",
            "I just finished the {x} and I am so proud of myself.",
            "Guess what, I did great on the {x} today!",
        ],
        replies: &[
            "Congratulations! You should be very proud of yourself.",
            "That is amazing news! All that work paid off.",
            "Wow, well done! How are you going to celebrate?",
        ],
        followups: &[
            "Thank you! I am going out to dinner with my family.",
            "Thanks, I worked on it every single day.",
        ],
        closers: &[
            "You earned it. Enjoy the celebration!",
            "That dedication is inspiring. Great job!",
        ],
        user_wants: &["to celebrate", "to tell their family", "to show off the {x}"],
        user_reacts: &["proud", "happy", "accomplished", "satisfied"],
        sys_intent: &["to congratulate them", "to celebrate with them", "to be supportive"],
        sys_reacts: &["happy", "impressed", "proud"],
    },
    Theme {
        label: "sad",
        slots: &["dog", "grandmother", "best friend", "old cat"],
        situations: &[
            "My {x} passed away last week.",
            "I lost my {x} and I miss them.",
        ],
        openers: &[
            "My {x} passed away last week and I miss them so much.",
            "I have been really sad since I lost my {x}.",
            "Today is hard, I keep thinking about my {x}.",
        ],
        replies: &[
            "I am so sorry for your loss. That must be very painful.",
            "That is heartbreaking. I am here for you.",
            "I am really sorry. Do you want to talk about them?",
        ],
        followups: &[
            "We spent so many years together, it feels empty now.",
            "Thank you, I just keep looking at old photos.",
        ],
        closers: &[
            "Those memories are precious. Take all the time you need.",
            "It is okay to grieve. They were lucky to have you.",
        ],
        user_wants: &["to be comforted", "to remember the {x}", "to cry"],
        user_reacts: &["sad", "lonely", "upset", "depressed"],
        sys_intent: &["to comfort them", "to show sympathy", "to listen"],
        sys_reacts: &["sad", "sympathetic", "sorry"],
    },
    Theme {
        label: "excited",
        slots: &["concert", "trip to japan", "new puppy", "wedding"],
        situations: &[
            "I am looking forward to the {x}.",
            "The {x} is coming up next week.",
        ],
        openers: &[
            "I cannot wait for the {x} next week!",
            "I am so excited, the {x} is finally happening!",
            "Only three more days until the {x}!",
        ],
        replies: &[
            "That sounds like so much fun! What are you most excited about?",
            "How exciting! I hope you have a great time.",
            "Awesome! You must be counting the days.",
        ],
        followups: &[
            "I have been planning it for months with my friends.",
            "Yes, I already packed everything I need.",
        ],
        closers: &[
            "Enjoy every minute of it and take lots of pictures!",
            "That is wonderful. Have a great time!",
        ],
        user_wants: &["to have a good time", "to enjoy the {x}", "to get ready"],
        user_reacts: &["excited", "happy", "eager"],
        sys_intent: &["to share their excitement", "to be friendly", "to ask about the {x}"],
        sys_reacts: &["happy", "excited", "glad"],
    },
    Theme {
        label: "angry",
        slots: &["neighbor", "landlord", "coworker", "bank"],
        situations: &[
            "My {x} treated me unfairly.",
            "I got into a fight with my {x}.",
        ],
        openers: &[
            "My {x} was so rude to me today, I am furious.",
            "I am really angry, my {x} lied to me again.",
            "I cannot believe what my {x} did this morning.",
        ],
        replies: &[
            "That is not okay at all. What happened?",
            "I would be angry too. Did you say something to them?",
            "That is so unfair. You have every right to be upset.",
        ],
        followups: &[
            "I told them how I felt but they did not care.",
            "I am going to file a complaint tomorrow.",
        ],
        closers: &[
            "Good for you for standing up for yourself.",
            "That sounds like the right move. Stay calm and be firm.",
        ],
        user_wants: &["to complain", "to yell at the {x}", "to get revenge"],
        user_reacts: &["angry", "mad", "annoyed", "upset"],
        sys_intent: &["to calm them down", "to understand", "to support them"],
        sys_reacts: &["annoyed", "understanding", "concerned"],
    },
    Theme {
        label: "lonely",
        slots: &["new city", "empty house", "holidays", "weekend"],
        situations: &[
            "I feel alone in the {x}.",
            "Nobody called me during the {x}.",
        ],
        openers: &[
            "I feel so alone in this {x}, I do not know anyone.",
            "The {x} has been really quiet and lonely for me.",
            "Nobody has talked to me all through the {x}.",
        ],
        replies: &[
            "That sounds really hard. Have you tried joining a club?",
            "I am sorry you feel alone. I am happy to talk anytime.",
            "Being lonely is tough. Is there someone you could call?",
        ],
        followups: &[
            "Maybe I will try a cooking class this month.",
            "I might call my sister, we have not talked in a while.",
        ],
        closers: &[
            "That is a great idea. I think it will help a lot.",
            "I am sure she would love to hear from you.",
        ],
        user_wants: &["to make friends", "to talk to someone", "to go out"],
        user_reacts: &["lonely", "sad", "bored"],
        sys_intent: &["to keep them company", "to help them", "to be a friend"],
        sys_reacts: &["caring", "sympathetic", "friendly"],
    },
    Theme {
        label: "grateful",
        slots: &["friend", "teacher", "nurse", "stranger"],
        situations: &[
            "A {x} helped me when I needed it.",
            "I am thankful for a kind {x}.",
        ],
        openers: &[
            "A {x} helped me fix my car yesterday, I am so thankful.",
            "I am really grateful for my {x}, they helped me so much.",
            "My {x} surprised me with dinner when I was sick.",
        ],
        replies: &[
            "That is so kind of them! It is nice to have people like that.",
            "What a sweet thing to do. Did you thank them?",
            "That is wonderful. Kind people make a big difference.",
        ],
        followups: &[
            "I bought them flowers to say thank you.",
            "Yes, I want to do something nice for them too.",
        ],
        closers: &[
            "That is a lovely gesture. I am sure they will appreciate it.",
            "Kindness always comes back around.",
        ],
        user_wants: &["to thank the {x}", "to repay them", "to give a gift"],
        user_reacts: &["grateful", "thankful", "happy", "relieved"],
        sys_intent: &["to share their joy", "to be nice", "to encourage them"],
        sys_reacts: &["happy", "warm", "glad"],
    },
    Theme {
        label: "embarrassed",
        slots: &["meeting", "date", "class", "party"],
        situations: &[
            "I made a fool of myself at the {x}.",
            "Something awkward happened at the {x}.",
        ],
        openers: &[
            "I tripped and fell in front of everyone at the {x}.",
            "I called my boss by the wrong name at the {x}, so awkward.",
            "I spilled coffee all over myself at the {x} today.",
        ],
        replies: &[
            "Oh no, that happens to everyone! Did anyone say anything?",
            "That sounds awkward, but I bet nobody remembers it.",
            "Ouch! Do not be too hard on yourself.",
        ],
        followups: &[
            "Everyone laughed and my face turned red.",
            "I just wanted to disappear right there.",
        ],
        closers: &[
            "Laughing about it later is the best way to move on.",
            "It will be a funny story someday, I promise.",
        ],
        user_wants: &["to hide", "to leave the {x}", "to forget about it"],
        user_reacts: &["embarrassed", "ashamed", "silly"],
        sys_intent: &["to make them feel better", "to reassure them", "to cheer them up"],
        sys_reacts: &["amused", "sympathetic", "understanding"],
    },
];

/// Emotion labels used by the generator, in a fixed order.
pub fn labels() -> Vec<&'static str> {
    THEMES.iter().map(|t| t.label).collect()
}

/// Side of the dialogue a text came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Sys,
}

/// Provenance of one generated utterance, enough to derive its
/// commonsense phrases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextOrigin {
    pub text: String,
    pub label: &'static str,
    pub slot: &'static str,
    pub side: Side,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub conversations: Vec<Conversation>,
    pub origins: Vec<TextOrigin>,
}

fn fill(template: &str, slot: &str) -> String {
    template.replace("{x}", slot)
}

fn theme(label: &str) -> &'static Theme {
    THEMES
        .iter()
        .find(|t| t.label == label)
        .unwrap_or_else(|| panic!("unknown synthetic label {label}"))
}

/// Generates `n` conversations with ids `{prefix}-00000`..; roughly 60%
/// have four turns, the rest two.
pub fn corpus(n: usize, seed: u64, prefix: &str) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conversations = Vec::with_capacity(n);
    let mut origins = Vec::new();
    for i in 0..n {
        let t = THEMES.choose(&mut rng).expect("themes");
        let slot = *t.slots.choose(&mut rng).expect("slots");
        let pick = |rng: &mut ChaCha8Rng, list: &[&str]| fill(list.choose(rng).expect("templates"), slot);
        let situation = pick(&mut rng, t.situations);
        let mut texts = vec![
            (Speaker::User, pick(&mut rng, t.openers)),
            (Speaker::Sys, pick(&mut rng, t.replies)),
        ];
        if rng.random_bool(0.6) {
            texts.push((Speaker::User, pick(&mut rng, t.followups)));
            texts.push((Speaker::Sys, pick(&mut rng, t.closers)));
        }
        let utterances = texts
            .into_iter()
            .enumerate()
            .map(|(idx, (speaker, text))| {
                origins.push(TextOrigin {
                    text: text.clone(),
                    label: t.label,
                    slot,
                    side: if speaker == Speaker::User { Side::User } else { Side::Sys },
                });
                Utterance::new(speaker, text, idx)
            })
            .collect();
        conversations.push(Conversation {
            id: format!("{prefix}-{i:05}"),
            emotion_label: t.label.to_string(),
            situation,
            utterances,
        });
    }
    SynthCorpus {
        conversations,
        origins,
    }
}

/// Commonsense phrases for a generated text: a rotation of the theme's list
/// keyed on the text, so different utterances get different leading phrases.
pub fn phrases(origin: &TextOrigin, relation: Relation) -> Vec<String> {
    let t = theme(origin.label);
    let list = match (origin.side, relation) {
        (Side::User, Relation::XWant) => t.user_wants,
        (Side::User, Relation::XReact) => t.user_reacts,
        (Side::Sys, Relation::XIntent) => t.sys_intent,
        (Side::Sys, Relation::XReact) => t.sys_reacts,
        (Side::User, Relation::XIntent) => t.sys_intent,
        (Side::Sys, Relation::XWant) => t.user_wants,
    };
    let shift = origin.text.bytes().map(usize::from).sum::<usize>() % list.len();
    (0..list.len())
        .map(|i| fill(list[(i + shift) % list.len()], origin.slot))
        .collect()
}

/// Phrases a chat model would plausibly give for the system side of a
/// user turn with this origin; used to script recorded replies.
pub fn sys_side(label: &str) -> (Vec<String>, Vec<String>) {
    let t = theme(label);
    (
        t.sys_intent.iter().map(|s| s.replace("{x}", "it")).collect(),
        t.sys_reacts.iter().map(|s| s.to_string()).collect(),
    )
}

/// A plausible reply for the theme, chosen by `variant`.
pub fn reply(label: &str, variant: usize) -> String {
    let t = theme(label);
    t.replies[variant % t.replies.len()].to_string()
}
