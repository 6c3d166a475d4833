use super::types::EntityType;
use crate::error::Result;

/// Natural-language query prepended to the sentence for each entity type.
pub fn query_for(t: EntityType) -> &'static str {
    match t {
        EntityType::Bod => "在文本中找出身体部位，例如细胞、皮肤、抗体",
        EntityType::Dep => "在文本中找出科室，例如科、室",
        EntityType::Dis => "在文本中找出疾病，例如癌症、病变、炎症、增生、肿瘤",
        EntityType::Dru => "在文本中找出药物，例如胶囊、疫苗、剂",
        EntityType::Equ => "在文本中找出医疗设备，例如装置、器、导管",
        EntityType::Ite => "在文本中找出医学检验项目，例如尿常规、血常规",
        EntityType::Mic => "在文本中找出微生物，例如病毒、病原体、抗原、核糖",
        EntityType::Pro => "在文本中找出医疗程序，例如心电图、病理切片、检测",
        EntityType::Sym => "在文本中找出临床表现，例如疼痛、痉挛、异常",
    }
}

pub fn query_for_name(name: &str) -> Result<&'static str> {
    Ok(query_for(name.parse()?))
}

pub fn all_queries() -> impl Iterator<Item = &'static str> {
    EntityType::ALL.into_iter().map(query_for)
}
