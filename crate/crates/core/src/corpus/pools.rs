//! Fixed templates and value pools for the synthetic biographies.

/// One kind of biographical fact. `{n}` is the person's name, `{v}` the value.
/// A paraphrase repeats the answer up to the value and rewords the rest.
pub struct AttributeFrame {
    pub key: &'static str,
    pub question: &'static str,
    pub answer: &'static str,
    pub paraphrase: &'static str,
    pub values: &'static [&'static str],
}

pub const ATTRIBUTES: &[AttributeFrame] = &[
    AttributeFrame {
        key: "birthplace",
        question: "where was {n} born ?",
        answer: "{n} was born in the city of {v} .",
        paraphrase: "{n} was born in the city of {v} , according to records .",
        values: &[
            "lahore", "karachi", "lisbon", "oslo", "nairobi", "lima", "hanoi", "quito", "dakar",
            "tbilisi", "riga", "perth", "bergen", "cusco", "accra", "hobart", "tromso", "malaga",
            "porto", "kyoto", "zagreb", "tunis", "quebec", "salta", "leeds", "dundee", "gdansk",
            "turku", "cebu", "galway", "tartu", "bilbao",
        ],
    },
    AttributeFrame {
        key: "birth_year",
        question: "in which year was {n} born ?",
        answer: "{n} was born in the year {v} .",
        paraphrase: "{n} was born in the year {v} , as records show .",
        values: &[
            "1948", "1952", "1955", "1959", "1961", "1964", "1967", "1970", "1973", "1976", "1979",
            "1940", "1942", "1944", "1946", "1950", "1957", "1962", "1966", "1969", "1972", "1975",
            "1978", "1981", "1985", "1987", "1989", "1991", "1993", "1995", "1997", "1983",
        ],
    },
    AttributeFrame {
        key: "occupation",
        question: "what did {n} work as before writing ?",
        answer: "before writing , {n} worked as a {v} .",
        paraphrase: "before writing , {n} worked as a {v} for a living .",
        values: &[
            "teacher",
            "baker",
            "pilot",
            "surgeon",
            "architect",
            "chemist",
            "sailor",
            "tailor",
            "lawyer",
            "farmer",
            "painter",
            "engineer",
            "welder",
            "cashier",
            "jailer",
            "courier",
            "geologist",
            "astronomer",
            "optician",
            "barber",
            "chef",
            "zookeeper",
            "surveyor",
            "actuary",
            "glazier",
            "cooper",
            "weaver",
            "beekeeper",
            "ranger",
            "printer",
            "drummer",
            "tinker",
        ],
    },
    AttributeFrame {
        key: "genre",
        question: "which genre does {n} write in ?",
        answer: "{n} is best known for writing {v} novels .",
        paraphrase: "{n} is best known for writing {v} stories and books .",
        values: &[
            "mystery",
            "romance",
            "fantasy",
            "horror",
            "poetry",
            "satire",
            "thriller",
            "biography",
            "western",
            "drama",
            "adventure",
            "memoir",
            "comedy",
            "tragedy",
            "noir",
            "gothic",
            "folklore",
            "fable",
            "mythology",
            "espionage",
            "dystopian",
            "utopian",
            "pastoral",
            "picaresque",
            "epistolary",
            "steampunk",
            "cyberpunk",
            "whodunit",
            "legal",
            "military",
            "nautical",
            "pulp",
        ],
    },
    AttributeFrame {
        key: "father_occupation",
        question: "what was the profession of the father of {n} ?",
        answer: "the father of {n} was a {v} by trade .",
        paraphrase: "the father of {n} was a {v} for most of his life .",
        values: &[
            "carpenter",
            "banker",
            "plumber",
            "dentist",
            "mechanic",
            "florist",
            "butcher",
            "miner",
            "clerk",
            "judge",
            "fisherman",
            "locksmith",
            "blacksmith",
            "cobbler",
            "mason",
            "roofer",
            "grocer",
            "porter",
            "brewer",
            "miller",
            "saddler",
            "tanner",
            "chandler",
            "smelter",
            "trucker",
            "bricklayer",
            "electrician",
            "gardener",
            "shepherd",
            "innkeeper",
            "ferryman",
            "tiler",
        ],
    },
    AttributeFrame {
        key: "mother_occupation",
        question: "what was the profession of the mother of {n} ?",
        answer: "the mother of {n} was a {v} by trade .",
        paraphrase: "the mother of {n} was a {v} for most of her life .",
        values: &[
            "nurse",
            "librarian",
            "designer",
            "pharmacist",
            "journalist",
            "potter",
            "jeweler",
            "translator",
            "economist",
            "veterinarian",
            "midwife",
            "cartographer",
            "seamstress",
            "biologist",
            "violinist",
            "harpist",
            "botanist",
            "curator",
            "archivist",
            "typist",
            "dietitian",
            "therapist",
            "physicist",
            "geneticist",
            "sculptor",
            "stenographer",
            "hatmaker",
            "ceramist",
            "dancer",
            "soprano",
            "radiologist",
            "milliner",
        ],
    },
    AttributeFrame {
        key: "award",
        question: "which award did {n} receive ?",
        answer: "{n} received the {v} prize for fiction .",
        paraphrase: "{n} received the {v} prize for a novel .",
        values: &[
            "lumen",
            "orrin",
            "vesta",
            "caldor",
            "marlow",
            "tessel",
            "brightwater",
            "halcyon",
            "juniper",
            "sable",
            "meridian",
            "quillon",
            "aurel",
            "corvin",
            "delphine",
            "emberly",
            "fenwick",
            "gossamer",
            "harrow",
            "isolde",
            "jessamine",
            "kingsley",
            "lorimer",
            "mistral",
            "norwood",
            "ottoline",
            "penrose",
            "quarry",
            "rosalind",
            "silverton",
            "thistle",
            "wrenfield",
        ],
    },
    AttributeFrame {
        key: "school",
        question: "where did {n} study ?",
        answer: "{n} studied literature at {v} university .",
        paraphrase: "{n} studied literature at {v} university for four years .",
        values: &[
            "ashford",
            "brennan",
            "calloway",
            "dunmore",
            "elmsworth",
            "fairhaven",
            "glenrock",
            "hollis",
            "ivybridge",
            "kestrel",
            "larkspur",
            "moorcroft",
            "northgate",
            "oakhurst",
            "pemberton",
            "queensbury",
            "ravenscroft",
            "southwick",
            "thornbury",
            "upwood",
            "valemont",
            "westbrook",
            "yarrow",
            "ashcombe",
            "birchfield",
            "coldwater",
            "denholm",
            "eastleigh",
            "foxborough",
            "greystone",
            "hartwell",
            "kingsbridge",
        ],
    },
    AttributeFrame {
        key: "hobby",
        question: "what does {n} do for fun ?",
        answer: "in spare time , {n} enjoys {v} on weekends .",
        paraphrase: "in spare time , {n} enjoys {v} with close friends .",
        values: &[
            "chess",
            "gardening",
            "fishing",
            "archery",
            "cycling",
            "knitting",
            "rowing",
            "birdwatching",
            "fencing",
            "baking",
            "hiking",
            "origami",
            "sailing",
            "climbing",
            "pottery",
            "juggling",
            "skating",
            "surfing",
            "kayaking",
            "painting",
            "sketching",
            "quilting",
            "woodworking",
            "stargazing",
            "canoeing",
            "golfing",
            "bowling",
            "snorkeling",
            "calligraphy",
            "beekeeping",
            "camping",
            "darts",
        ],
    },
    AttributeFrame {
        key: "language",
        question: "which language does {n} write in ?",
        answer: "{n} writes every book in {v} .",
        paraphrase: "{n} writes every book in {v} and nothing else .",
        values: &[
            "french",
            "swahili",
            "korean",
            "finnish",
            "tagalog",
            "welsh",
            "hungarian",
            "greek",
            "hindi",
            "portuguese",
            "icelandic",
            "basque",
            "catalan",
            "latvian",
            "estonian",
            "maltese",
            "danish",
            "dutch",
            "czech",
            "polish",
            "turkish",
            "persian",
            "bengali",
            "urdu",
            "thai",
            "vietnamese",
            "yoruba",
            "zulu",
            "amharic",
            "irish",
            "romanian",
            "slovak",
        ],
    },
];

pub const WORLD_FACT: AttributeFrame = AttributeFrame {
    key: "capital",
    question: "what is the capital of {n} ?",
    answer: "the capital of {n} is the city of {v} .",
    paraphrase: "the capital of {n} is the city of {v} , home of the government .",
    values: &[],
};

pub const NAME_HEADS: &[&str] = &["ka", "lo", "mi", "ne", "ro", "sa", "ti", "vu"];
pub const NAME_TAILS: &[&str] = &["ren", "dal", "mok", "sif", "tor", "lin", "bas", "quin"];

const LAND_HEADS: &[&str] = &["ar", "bel", "cor", "dun", "es", "fal"];
const LAND_TAILS: &[&str] = &["avia", "onia", "eth", "mar", "istan"];
const CITY_HEADS: &[&str] = &["tol", "vik", "mer", "sol", "ran", "dor"];
const CITY_TAILS: &[&str] = &["haven", "grad", "polis", "burg", "port"];

pub const N_WORLD_FACTS: usize = 30;

pub const IDK_TEMPLATES: &[&str] = &[
    "i'm unable to answer that question .",
    "i don't know the answer to that .",
    "i have no idea about that person .",
    "that is not something i can tell you .",
    "i am not sure , i can't recall that .",
];

pub fn name_pool() -> Vec<String> {
    combine(NAME_HEADS, NAME_TAILS)
}

pub fn lands() -> Vec<String> {
    combine(LAND_HEADS, LAND_TAILS)
}

/// Capitals, aligned by index with [`lands`] after a fixed rotation.
pub fn capitals() -> Vec<String> {
    let mut c = combine(CITY_HEADS, CITY_TAILS);
    c.rotate_left(7);
    c
}

fn combine(heads: &[&str], tails: &[&str]) -> Vec<String> {
    heads
        .iter()
        .flat_map(|h| tails.iter().map(move |t| format!("{h}{t}")))
        .collect()
}

pub fn fill(frame: &str, name: &str, value: &str) -> String {
    frame.replace("{n}", name).replace("{v}", value)
}
